//! Prefix-conditioned instruction decoder, trained to reconstruct an
//! instruction from its own text embedding, and the projection of change
//! embeddings into the span of known instruction embeddings.
//!
//! Sequence layout: position 0 holds the projected prefix (standing in for
//! BOS), positions `1..8` hold the embeddings of tokens `1..8` shifted by
//! one, and the output at position `j` predicts token `j + 1`.

use iclip_numerics::{softmax_in_place, Graph, ParamMap, Real, RngStream, Tensor, Var};

use crate::corpus::{Tokens, BOS, EOS, N_TOK, PAD, VOCAB_SIZE};
use crate::encoders::IClip;
use crate::error::{CoreError, Result};
use crate::nn::{block, causal_mask, init_block, init_embedding, init_linear, init_ln, layer_norm, linear, stack, Arch};
use crate::train::{Batcher, Trainer};

/// Predicted positions per sequence.
pub const STEPS: usize = N_TOK - 1;
const CHUNK: usize = 256;

pub fn init_decoder(arch: Arch, prefix_width: usize, seed: u64) -> ParamMap {
    let w = arch.width;
    let mut rng = RngStream::new(seed, "decoder-init");
    let mut p = ParamMap::new();
    init_linear(&mut p, &mut rng, "dec.prefix", prefix_width, w, 1.0);
    init_embedding(&mut p, &mut rng, "dec.tok", VOCAB_SIZE, w, 0.5);
    init_embedding(&mut p, &mut rng, "dec.pos", N_TOK, w, 0.02);
    for i in 0..arch.layers {
        init_block(&mut p, &mut rng, &format!("dec.block{i}"), arch);
    }
    init_ln(&mut p, "dec.ln_f", w);
    init_linear(&mut p, &mut rng, "dec.head", w, VOCAB_SIZE, 1.0);
    p
}

/// Logits `[B·7, VOCAB]`, row `b·7 + j` predicting token `j + 1`.
/// `prefix` is `[B, P]`; only tokens `1..7` of each sequence are read.
pub fn decoder_logits<F: Real>(g: &mut Graph<'_, F>, prefix: Var, tokens: &[Tokens]) -> iclip_numerics::Result<Var> {
    let b = tokens.len();
    let table = g.param("dec.tok")?;
    let w = g.shape(table)[1];
    let pre = linear(g, prefix, "dec.prefix")?;
    let pre = g.reshape(pre, &[b, 1, w])?;
    let idx: Vec<usize> = tokens
        .iter()
        .flat_map(|t| t.0[1..N_TOK].iter().flat_map(move |&id| (0..w).map(move |j| id * w + j)))
        .collect();
    let emb = g.gather(table, idx.into(), &[b, STEPS, w])?;
    let x = g.concat(&[pre, emb], 1)?;
    let pos = g.param("dec.pos")?;
    let mut h = g.add(x, pos)?;
    let mask = g.constant(causal_mask(N_TOK).cast());
    let layers = (0..).take_while(|i| g.param(&format!("dec.block{i}.ln1.g")).is_ok()).count();
    for i in 0..layers {
        h = block(g, h, &format!("dec.block{i}"), Some(mask))?;
    }
    let h = g.narrow(h, 1, 0, STEPS)?;
    let h = layer_norm(g, h, "dec.ln_f")?;
    let logits = linear(g, h, "dec.head")?;
    g.reshape(logits, &[b * STEPS, VOCAB_SIZE])
}

/// Targets and weights for [`decoder_logits`] rows: PAD targets weigh 0.
pub fn decap_targets<F: Real>(tokens: &[Tokens]) -> (Vec<usize>, Vec<F>) {
    let targets: Vec<usize> = tokens.iter().flat_map(|t| t.0[1..].iter().copied()).collect();
    let weights = targets.iter().map(|&t| if t == PAD { F::zero() } else { F::one() }).collect();
    (targets, weights)
}

/// Mean token cross-entropy of `logits[7, VOCAB]` against `target`,
/// skipping PAD positions; double precision.
pub fn decap_loss(logits: &Tensor, target: &Tokens) -> Result<f64> {
    if logits.shape() != [STEPS, VOCAB_SIZE] {
        return Err(CoreError::Invalid(format!(
            "decoder logits have shape {:?}, expected [{STEPS}, {VOCAB_SIZE}]",
            logits.shape()
        )));
    }
    let mut g: Graph<f64> = Graph::new();
    let l = g.try_constant(logits.cast())?;
    let (t, w) = decap_targets::<f64>(&[*target]);
    let ce = g.cross_entropy(l, &t, &w)?;
    Ok(g.value(ce).item())
}

/// Unit-normalized text embeddings of every distinct instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub rows: Vec<Tensor>,
    pub tokens: Vec<Tokens>,
}

fn normalized(t: &Tensor) -> Tensor {
    let n = t.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    t.map(|v| (v as f64 / (n + iclip_numerics::COSINE_EPS)) as f32)
}

impl SupportSet {
    pub fn build(iclip: &IClip, instructions: &[Tokens]) -> Result<SupportSet> {
        let mut tokens = instructions.to_vec();
        tokens.sort();
        tokens.dedup();
        if tokens.is_empty() {
            return Err(CoreError::Invalid("support set needs at least one instruction".into()));
        }
        let rows = iclip.encode_text(&tokens)?.iter().map(normalized).collect();
        Ok(SupportSet { rows, tokens })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_params(&self) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("support.rows".into(), stack(&self.rows.iter().collect::<Vec<_>>()));
        let ids = self.tokens.iter().flat_map(|t| t.0.iter().map(|&i| i as f32)).collect();
        p.insert(
            "support.tokens".into(),
            Tensor::new(vec![self.tokens.len(), N_TOK], ids).expect("support token shape"),
        );
        p
    }

    pub fn from_params(p: &ParamMap) -> Result<SupportSet> {
        let (Some(rows), Some(ids)) = (p.get("support.rows"), p.get("support.tokens")) else {
            return Err(CoreError::Invalid("checkpoint lacks the support set".into()));
        };
        let rows = crate::nn::unstack(rows);
        let tokens = ids
            .data()
            .chunks(N_TOK)
            .map(|c| {
                let mut t = [PAD; N_TOK];
                for (d, v) in t.iter_mut().zip(c) {
                    *d = *v as usize;
                }
                Tokens(t)
            })
            .collect::<Vec<_>>();
        if rows.len() != tokens.len() || rows.is_empty() {
            return Err(CoreError::Invalid("support set rows and tokens disagree".into()));
        }
        Ok(SupportSet { rows, tokens })
    }

    /// Softmax weights `wᵢ ∝ exp(cos(zᵢ, z) / sharpening)`.
    pub fn weights(&self, z: &Tensor, sharpening: f64) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(CoreError::Invalid("empty support set".into()));
        }
        if !(sharpening > 0.0) {
            return Err(CoreError::Config(format!("sharpening must be positive, got {sharpening}")));
        }
        let zd: Vec<f64> = z.data().iter().map(|v| *v as f64).collect();
        let mut w: Vec<f64> = self
            .rows
            .iter()
            .map(|r| {
                let rd: Vec<f64> = r.data().iter().map(|v| *v as f64).collect();
                iclip_numerics::cosine(&rd, &zd) / sharpening
            })
            .collect();
        softmax_in_place(&mut w);
        Ok(w)
    }
}

/// Similarity-weighted mean of the support rows, renormalized to unit
/// length.
pub fn project_visual(z_vis: &Tensor, support: &SupportSet, sharpening: f64) -> Result<Tensor> {
    let w = support.weights(z_vis, sharpening)?;
    let width = support.rows[0].numel();
    let mut out = vec![0.0f64; width];
    for (wi, r) in w.iter().zip(&support.rows) {
        for (o, v) in out.iter_mut().zip(r.data()) {
            *o += wi * *v as f64;
        }
    }
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt() + iclip_numerics::COSINE_EPS;
    Ok(Tensor::new(vec![width], out.iter().map(|v| (v / n) as f32).collect())?)
}

/// Highest logit among emittable ids; the first (lowest) id wins ties.
pub fn argmax_allowed(row: &[f32]) -> usize {
    let mut best = usize::MAX;
    for (id, v) in row.iter().enumerate() {
        if id != PAD && id != BOS && (best == usize::MAX || *v > row[best]) {
            best = id;
        }
    }
    best
}

/// A trained decoder.
#[derive(Clone, Debug)]
pub struct InstructionDecoder {
    params: ParamMap,
}

impl InstructionDecoder {
    pub fn new(params: ParamMap) -> Result<InstructionDecoder> {
        for name in ["dec.prefix.w", "dec.tok", "dec.pos", "dec.head.w", "dec.block0.ln1.g"] {
            if !params.contains(name) {
                return Err(CoreError::Invalid(format!("decoder checkpoint lacks `{name}`")));
            }
        }
        Ok(InstructionDecoder {
            params: params.with_prefix("dec."),
        })
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    /// Greedy decoding from unit-normalized prefixes. PAD and BOS are never
    /// emitted, ties go to the lowest id, and slot 7 is always EOS.
    pub fn decode_greedy(&self, prefixes: &[Tensor]) -> Result<Vec<Tokens>> {
        let mut out = Vec::with_capacity(prefixes.len());
        for chunk in prefixes.chunks(CHUNK) {
            let b = chunk.len();
            let mut seqs = vec![Tokens([PAD; N_TOK]); b];
            for s in &mut seqs {
                s.0[0] = BOS;
            }
            let mut done = vec![false; b];
            let pre = stack(&chunk.iter().collect::<Vec<_>>());
            for j in 0..STEPS {
                if done.iter().all(|d| *d) {
                    break;
                }
                let mut g: Graph<f32> = Graph::new();
                g.bind(&self.params, false);
                let pv = g.try_constant(pre.clone())?;
                let logits = decoder_logits(&mut g, pv, &seqs)?;
                let lv = g.value(logits).data();
                for (i, s) in seqs.iter_mut().enumerate() {
                    if done[i] {
                        continue;
                    }
                    let next = if j == STEPS - 1 {
                        EOS
                    } else {
                        let row = &lv[(i * STEPS + j) * VOCAB_SIZE..(i * STEPS + j + 1) * VOCAB_SIZE];
                        argmax_allowed(row)
                    };
                    s.0[j + 1] = next;
                    if next == EOS {
                        done[i] = true;
                    }
                }
            }
            out.extend(seqs);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    /// Per-coordinate Gaussian noise added to the unit prefix in training.
    pub prefix_noise: f64,
    pub arch: Arch,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            seed: 0,
            steps: 800,
            batch: 64,
            lr: 1e-3,
            prefix_noise: 0.03,
            arch: Arch { width: 64, layers: 2 },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderReport {
    pub steps: usize,
    pub final_loss: f64,
    pub unique_instructions: usize,
    /// Exact reconstructions of the training instructions from their own
    /// text embeddings.
    pub exact_match: f64,
}

/// Teacher-forced training on `(z_txt(p), p)` over the distinct
/// instructions, then the support set over the same instructions.
pub fn train_decoder(iclip: &IClip, instructions: &[Tokens], cfg: &DecoderConfig) -> Result<(InstructionDecoder, SupportSet, DecoderReport)> {
    let support = SupportSet::build(iclip, instructions)?;
    let width = support.rows[0].numel();
    let mut trainer = Trainer::new(init_decoder(cfg.arch, width, cfg.seed), cfg.lr, "train-decoder", cfg.seed)?;
    let mut batcher = Batcher::new((0..support.len()).collect(), RngStream::new(cfg.seed, "decoder-batches"))?;
    let mut noise = RngStream::new(cfg.seed, "decoder-prefix-noise");
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let ids = batcher.next_batch(cfg.batch);
        let pre: Vec<Tensor> = ids
            .iter()
            .map(|&i| {
                let jitter = noise.normal_vec(width);
                let row = support.rows[i].data().iter().zip(&jitter);
                let t = Tensor::new(vec![width], row.map(|(v, e)| v + e * cfg.prefix_noise as f32).collect())?;
                Ok(normalized(&t))
            })
            .collect::<Result<_>>()?;
        let tokens: Vec<Tokens> = ids.iter().map(|&i| support.tokens[i]).collect();
        let (loss, grads) = {
            let mut g: Graph<f32> = Graph::new();
            g.bind(trainer.params(), true);
            let pv = g.constant(stack(&pre.iter().collect::<Vec<_>>()));
            let logits = trainer.check(step, decoder_logits(&mut g, pv, &tokens))?;
            let (t, w) = decap_targets::<f32>(&tokens);
            let l = trainer.check(step, g.cross_entropy(logits, &t, &w))?;
            let grads = trainer.check(step, g.backward(l))?;
            (g.value(l).item(), grads.params)
        };
        trainer.step(step, loss, grads)?;
        last = loss as f64;
    }
    let decoder = InstructionDecoder::new(trainer.into_params())?;
    let decoded = decoder.decode_greedy(&support.rows)?;
    let hits = decoded.iter().zip(&support.tokens).filter(|(a, b)| a == b).count();
    let report = DecoderReport {
        steps: cfg.steps,
        final_loss: last,
        unique_instructions: support.len(),
        exact_match: hits as f64 / support.len() as f64,
    };
    Ok((decoder, support, report))
}
