//! The I-CLIP pair: a change encoder that reads only feature differences
//! from a shared frozen backbone, and an instruction encoder, trained with
//! a symmetric contrastive loss.

use std::sync::Arc;

use iclip_numerics::{Graph, NumericsError, ParamMap, Real, RngStream, Tensor, Var};

use crate::backbone::{FeatureBackbone, FeatureStack, InputMode, StackVars, TOKENS};
use crate::corpus::{Corpus, Split, Tokens, N_TOK, PAD, VOCAB_SIZE};
use crate::diffusion::{fd, Codec, NoiseSchedule};
use crate::error::{CoreError, Result};
use crate::nn::{block, init_block, init_embedding, init_linear, init_ln, layer_norm, linear, stack, Arch, MASKED};
use crate::train::{Batcher, Trainer};

pub const LOG_TAU: &str = "head.log_tau";
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 1.0;
const CHUNK: usize = 128;

/// Trunk (`vis.`), text tower (`txt.`) and the temperature.
pub fn init_iclip(arch: Arch, seed: u64) -> ParamMap {
    let w = arch.width;
    let mut rng = RngStream::new(seed, "iclip-init");
    let mut p = ParamMap::new();
    init_linear(&mut p, &mut rng, "vis.in", w, w, 1.0);
    init_embedding(&mut p, &mut rng, "vis.pos", TOKENS, w, 0.02);
    for i in 0..arch.layers {
        init_block(&mut p, &mut rng, &format!("vis.block{i}"), arch);
    }
    init_ln(&mut p, "vis.ln_f", w);
    init_linear(&mut p, &mut rng, "vis.out", w, w, 1.0);

    init_embedding(&mut p, &mut rng, "txt.tok", VOCAB_SIZE, w, 0.5);
    init_embedding(&mut p, &mut rng, "txt.pos", N_TOK, w, 0.02);
    for i in 0..arch.layers {
        init_block(&mut p, &mut rng, &format!("txt.block{i}"), arch);
    }
    init_ln(&mut p, "txt.ln_f", w);
    init_linear(&mut p, &mut rng, "txt.out", w, w, 1.0);
    p.insert(LOG_TAU.into(), Tensor::full(&[1], TAU_INIT.ln() as f32));
    p
}

/// Change embedding `[B, W]` from the two images' feature stacks. The trunk
/// sees the final-feature difference as its input tokens, and block `i`
/// additionally receives the `i`-th intermediate difference.
pub fn change_graph<F: Real>(g: &mut Graph<'_, F>, original: &StackVars, edited: &StackVars) -> iclip_numerics::Result<Var> {
    if original.layers() != edited.layers() {
        return Err(NumericsError::Config("feature stacks differ in depth".into()));
    }
    let b = g.shape(original.final_feature)[0];
    let w = g.shape(original.final_feature)[1];
    let dd = g.sub(edited.final_feature, original.final_feature)?;
    let x = linear(g, dd, "vis.in")?;
    let x = g.reshape(x, &[b, 1, w])?;
    let pos = g.param("vis.pos")?;
    let mut h = g.add(x, pos)?;
    for (i, (o, e)) in original.intermediates.iter().zip(&edited.intermediates).enumerate() {
        let d = g.sub(*e, *o)?;
        h = g.add(h, d)?;
        h = block(g, h, &format!("vis.block{i}"), None)?;
    }
    let h = g.mean_axis(h, 1)?;
    let h = layer_norm(g, h, "vis.ln_f")?;
    linear(g, h, "vis.out")
}

/// Instruction embedding `[B, W]`: PAD keys are masked out of attention and
/// the output is the mean over non-PAD positions.
pub fn text_graph<F: Real>(g: &mut Graph<'_, F>, tokens: &[Tokens]) -> iclip_numerics::Result<Var> {
    let b = tokens.len();
    let table = g.param("txt.tok")?;
    let w = g.shape(table)[1];
    let idx: Vec<usize> = tokens
        .iter()
        .flat_map(|t| t.0.iter().flat_map(move |&id| (0..w).map(move |j| id * w + j)))
        .collect();
    let e = g.gather(table, Arc::from(idx), &[b, N_TOK, w])?;
    let pos = g.param("txt.pos")?;
    let mut h = g.add(e, pos)?;
    let mask: Vec<F> = tokens
        .iter()
        .flat_map(|t| t.0.iter().map(|&id| F::of(if id == PAD { MASKED as f64 } else { 0.0 })))
        .collect();
    let mask = g.constant(Tensor::new(vec![b, 1, N_TOK], mask)?);
    let layers = (0..).take_while(|i| g.param(&format!("txt.block{i}.ln1.g")).is_ok()).count();
    for i in 0..layers {
        h = block(g, h, &format!("txt.block{i}"), Some(mask))?;
    }
    let weights: Vec<F> = tokens
        .iter()
        .flat_map(|t| {
            let n = t.len_non_pad().max(1) as f64;
            t.0.iter().map(move |&id| F::of(if id == PAD { 0.0 } else { 1.0 / n }))
        })
        .collect();
    let weights = g.constant(Tensor::new(vec![b, N_TOK, 1], weights)?);
    let h = g.mul(h, weights)?;
    let h = g.sum_axis(h, 1)?;
    let h = layer_norm(g, h, "txt.ln_f")?;
    linear(g, h, "txt.out")
}

/// Scaled similarity logits `[n, n]`: `cos(z_vis_i, z_txt_j) / τ`.
pub fn similarity_logits<F: Real>(g: &mut Graph<'_, F>, z_vis: Var, z_txt: Var, log_tau: Var) -> iclip_numerics::Result<Var> {
    let v = g.l2_normalize(z_vis)?;
    let t = g.l2_normalize(z_txt)?;
    let tt = g.transpose(t)?;
    let s = g.matmul(v, tt)?;
    let inv = g.scale(log_tau, F::of(-1.0))?;
    let inv = g.exp(inv)?;
    g.mul(s, inv)
}

/// `−(1/n)·Σᵢ [log softmax_j(sᵢⱼ/τ)ᵢ + log softmax_j(sⱼᵢ/τ)ᵢ]`.
pub fn contrastive_graph<F: Real>(g: &mut Graph<'_, F>, z_vis: Var, z_txt: Var, log_tau: Var) -> iclip_numerics::Result<Var> {
    let n = g.shape(z_vis)[0];
    if n == 0 || g.shape(z_txt)[0] != n {
        return Err(NumericsError::ShapeMismatch {
            op: "contrastive",
            lhs: g.shape(z_vis).to_vec(),
            rhs: g.shape(z_txt).to_vec(),
        });
    }
    let logits = similarity_logits(g, z_vis, z_txt, log_tau)?;
    let targets: Vec<usize> = (0..n).collect();
    let ones = vec![F::one(); n];
    let a = g.cross_entropy(logits, &targets, &ones)?;
    let lt = g.transpose(logits)?;
    let b = g.cross_entropy(lt, &targets, &ones)?;
    g.add(a, b)
}

/// [`contrastive_graph`] on plain rows, in double precision.
pub fn contrastive_loss(z_vis: &[Tensor], z_txt: &[Tensor], tau: f64) -> Result<f64> {
    if z_vis.is_empty() || z_vis.len() != z_txt.len() {
        return Err(CoreError::Invalid(format!(
            "contrastive loss needs equal non-empty batches, got {} and {}",
            z_vis.len(),
            z_txt.len()
        )));
    }
    let mut g: Graph<f64> = Graph::new();
    let v = g.try_constant(stack(&z_vis.iter().collect::<Vec<_>>()).cast())?;
    let t = g.try_constant(stack(&z_txt.iter().collect::<Vec<_>>()).cast())?;
    let lt = g.constant(Tensor::full(&[1], tau.ln()));
    let l = contrastive_graph(&mut g, v, t, lt)?;
    Ok(g.value(l).item())
}

/// Input to the change encoder: clean images, or latents with timesteps.
#[derive(Clone, Copy, Debug)]
pub enum ChangeInput<'a> {
    Image(&'a Tensor),
    Latent(&'a Tensor, usize),
}

/// Frozen I-CLIP: trunk, text tower and temperature, plus the shared
/// backbone both images pass through.
#[derive(Clone, Debug)]
pub struct IClip {
    params: ParamMap,
    pub backbone: FeatureBackbone,
}

impl IClip {
    pub fn new(params: ParamMap, backbone: FeatureBackbone) -> Result<IClip> {
        let expected = init_iclip(backbone.spec.arch, 0);
        for (name, t) in expected.iter() {
            if params.get(name).map(|p| p.shape()) != Some(t.shape()) {
                return Err(CoreError::Invalid(format!("I-CLIP checkpoint lacks `{name}` of shape {:?}", t.shape())));
            }
        }
        let mut own = params.with_prefix("vis.");
        own.extend(params.with_prefix("txt."));
        own.extend(params.with_prefix("head."));
        Ok(IClip { params: own, backbone })
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn tau(&self) -> f64 {
        (self.params.get(LOG_TAU).expect("checked").item() as f64).exp()
    }

    fn stacks(&self, inputs: &[ChangeInput<'_>]) -> Result<Vec<FeatureStack>> {
        let mode = self.backbone.spec.mode;
        let mut imgs = Vec::with_capacity(inputs.len());
        let mut ks = Vec::with_capacity(inputs.len());
        for x in inputs {
            match (x, mode) {
                (ChangeInput::Image(t), InputMode::Image) => imgs.push(*t),
                (ChangeInput::Latent(t, k), InputMode::Latent) => {
                    imgs.push(*t);
                    ks.push(*k);
                }
                _ => return Err(CoreError::Invalid(format!("{mode:?} backbone given {x:?}"))),
            }
        }
        let ks = (mode == InputMode::Latent).then_some(ks.as_slice());
        self.backbone.features(&imgs, ks)
    }

    /// Change embeddings for paired inputs; both sides must match the
    /// backbone's mode.
    pub fn encode_change(&self, original: &[ChangeInput<'_>], edited: &[ChangeInput<'_>]) -> Result<Vec<Tensor>> {
        if original.len() != edited.len() {
            return Err(CoreError::Invalid("unpaired change inputs".into()));
        }
        let so = self.stacks(original)?;
        let se = self.stacks(edited)?;
        let mut out = Vec::with_capacity(so.len());
        for (co, ce) in so.chunks(CHUNK).zip(se.chunks(CHUNK)) {
            let mut g: Graph<f32> = Graph::new();
            g.bind(&self.params, false);
            let o = StackVars::constant(&mut g, &co.iter().collect::<Vec<_>>());
            let e = StackVars::constant(&mut g, &ce.iter().collect::<Vec<_>>());
            let z = change_graph(&mut g, &o, &e)?;
            out.extend(crate::nn::unstack(g.value(z)));
        }
        Ok(out)
    }

    pub fn encode_text(&self, tokens: &[Tokens]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(CHUNK) {
            let mut g: Graph<f32> = Graph::new();
            g.bind(&self.params, false);
            let z = text_graph(&mut g, chunk)?;
            out.extend(crate::nn::unstack(g.value(z)));
        }
        Ok(out)
    }

    /// Alignment of clean latent pairs with instructions:
    /// `cos(z_vis(Lᵒ, 0, Lᵉ, 0), z_txt(p))`.
    pub fn score(&self, originals: &[&Tensor], edited: &[&Tensor], tokens: &[Tokens]) -> Result<Vec<f64>> {
        let o: Vec<ChangeInput> = originals.iter().map(|t| ChangeInput::Latent(t, 0)).collect();
        let e: Vec<ChangeInput> = edited.iter().map(|t| ChangeInput::Latent(t, 0)).collect();
        let zv = self.encode_change(&o, &e)?;
        let zt = self.encode_text(tokens)?;
        Ok(zv.iter().zip(&zt).map(|(a, b)| iclip_numerics::cosine(a.data(), b.data()) as f64).collect())
    }
}

/// Fraction of rows whose most similar text carries the row's own
/// instruction (duplicate instructions count as a hit).
pub fn in_batch_top1(z_vis: &[Tensor], z_txt: &[Tensor], tokens: &[Tokens]) -> f64 {
    let mut hits = 0;
    for (i, v) in z_vis.iter().enumerate() {
        let best = z_txt
            .iter()
            .enumerate()
            .map(|(j, t)| (j, iclip_numerics::cosine(v.data(), t.data())))
            .fold((0, f32::NEG_INFINITY), |acc, (j, s)| if s > acc.1 { (j, s) } else { acc })
            .0;
        if tokens[best] == tokens[i] {
            hits += 1;
        }
    }
    hits as f64 / z_vis.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct IClipConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for IClipConfig {
    fn default() -> Self {
        IClipConfig {
            seed: 0,
            steps: 1000,
            batch: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IClipReport {
    pub steps: usize,
    pub final_loss: f64,
    pub losses: Vec<f64>,
    pub tau: f64,
    /// In-batch top-1 on clean holdout samples before and after training.
    pub init_top1: f64,
    pub holdout_top1: f64,
    pub holdout_batch: usize,
    /// Mean clean-latent alignment on clean and on corrupted holdout samples.
    pub mean_score_clean: f64,
    pub mean_score_corrupted: f64,
}

fn holdout_top1(iclip: &IClip, latents: &[(Tensor, Tensor)], tokens: &[Tokens], batch: usize) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0;
    for (lc, tc) in latents.chunks(batch).zip(tokens.chunks(batch)) {
        if lc.len() < batch {
            break;
        }
        let o: Vec<ChangeInput> = lc.iter().map(|(a, _)| ChangeInput::Latent(a, 0)).collect();
        let e: Vec<ChangeInput> = lc.iter().map(|(_, b)| ChangeInput::Latent(b, 0)).collect();
        let zv = iclip.encode_change(&o, &e)?;
        let zt = iclip.encode_text(tc)?;
        acc += in_batch_top1(&zv, &zt, tc) * lc.len() as f64;
        n += lc.len();
    }
    Ok(acc / n.max(1) as f64)
}

/// Trains trunk, text tower and temperature against the frozen latent
/// backbone. Both latents are noised with independent uniform timesteps.
pub fn train_iclip(
    ld: &FeatureBackbone,
    codec: &Codec,
    schedule: &NoiseSchedule,
    corpus: &Corpus,
    split: Split,
    cfg: &IClipConfig,
) -> Result<(IClip, IClipReport)> {
    if ld.spec.mode != InputMode::Latent {
        return Err(CoreError::Config("I-CLIP needs the latent-mode backbone".into()));
    }
    let encode_pairs = |ids: &[usize]| -> Result<Vec<(Tensor, Tensor)>> {
        let o = codec.encode(&ids.iter().map(|&i| &corpus.samples[i].original).collect::<Vec<_>>())?;
        let e = codec.encode(&ids.iter().map(|&i| &corpus.samples[i].edited).collect::<Vec<_>>())?;
        Ok(o.into_iter().zip(e).collect())
    };
    let train_ids = split.train_ids();
    let train = encode_pairs(&train_ids)?;
    let clean_holdout: Vec<usize> = split.holdout_ids().into_iter().filter(|&i| !corpus.samples[i].corrupted).collect();
    let holdout = encode_pairs(&clean_holdout)?;
    let holdout_tokens: Vec<Tokens> = clean_holdout.iter().map(|&i| corpus.samples[i].instruction).collect();

    let params = init_iclip(ld.spec.arch, cfg.seed);
    let init_top1 = holdout_top1(&IClip::new(params.clone(), ld.clone())?, &holdout, &holdout_tokens, cfg.batch)?;
    let mut trainer = Trainer::new(params, cfg.lr, "train-iclip", cfg.seed)?;
    let mut batcher = Batcher::new((0..train.len()).collect(), RngStream::new(cfg.seed, "iclip-batches"))?;
    let mut k_rng = RngStream::new(cfg.seed, "iclip-timesteps");
    let mut noise_rng = RngStream::new(cfg.seed, "iclip-noise");
    let t = schedule.steps();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let ids = batcher.next_batch(cfg.batch);
        let mut no = Vec::with_capacity(ids.len());
        let mut ne = Vec::with_capacity(ids.len());
        let mut ko = Vec::with_capacity(ids.len());
        let mut ke = Vec::with_capacity(ids.len());
        for &i in &ids {
            let (k1, k2) = (k_rng.below(t + 1), k_rng.below(t + 1));
            let (lo, le) = &train[i];
            let n1 = Tensor::from_fn(lo.shape(), |_| noise_rng.normal() as f32);
            let n2 = Tensor::from_fn(le.shape(), |_| noise_rng.normal() as f32);
            no.push(fd(schedule, lo, &n1, k1)?.latent);
            ne.push(fd(schedule, le, &n2, k2)?.latent);
            ko.push(k1);
            ke.push(k2);
        }
        let so = ld.features(&no.iter().collect::<Vec<_>>(), Some(&ko))?;
        let se = ld.features(&ne.iter().collect::<Vec<_>>(), Some(&ke))?;
        let tokens: Vec<Tokens> = ids.iter().map(|&i| corpus.samples[train_ids[i]].instruction).collect();
        let (loss, grads) = {
            let mut g: Graph<f32> = Graph::new();
            g.bind(trainer.params(), true);
            let o = StackVars::constant(&mut g, &so.iter().collect::<Vec<_>>());
            let e = StackVars::constant(&mut g, &se.iter().collect::<Vec<_>>());
            let zv = trainer.check(step, change_graph(&mut g, &o, &e))?;
            let zt = trainer.check(step, text_graph(&mut g, &tokens))?;
            let lt = trainer.check(step, g.param(LOG_TAU))?;
            let l = trainer.check(step, contrastive_graph(&mut g, zv, zt, lt))?;
            let grads = trainer.check(step, g.backward(l))?;
            (g.value(l).item(), grads.params)
        };
        trainer.step(step, loss, grads)?;
        let lt = trainer.store.params_mut().get_mut(LOG_TAU).expect("log tau");
        let v = &mut lt.data_mut()[0];
        *v = v.clamp(TAU_MIN.ln() as f32, TAU_MAX.ln() as f32);
        losses.push(loss as f64);
    }
    let iclip = IClip::new(trainer.into_params(), ld.clone())?;
    let holdout_top1 = holdout_top1(&iclip, &holdout, &holdout_tokens, cfg.batch)?;

    let all_holdout = split.holdout_ids();
    let pairs = encode_pairs(&all_holdout)?;
    let scores = iclip.score(
        &pairs.iter().map(|p| &p.0).collect::<Vec<_>>(),
        &pairs.iter().map(|p| &p.1).collect::<Vec<_>>(),
        &all_holdout.iter().map(|&i| corpus.samples[i].instruction).collect::<Vec<_>>(),
    )?;
    let mean_where = |want: bool| {
        let v: Vec<f64> = all_holdout
            .iter()
            .zip(&scores)
            .filter(|(i, _)| corpus.samples[**i].corrupted == want)
            .map(|(_, s)| *s)
            .collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let report = IClipReport {
        steps: cfg.steps,
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        tau: iclip.tau(),
        init_top1,
        holdout_top1,
        holdout_batch: cfg.batch,
        mean_score_clean: mean_where(false),
        mean_score_corrupted: mean_where(true),
        losses,
    };
    Ok((iclip, report))
}
