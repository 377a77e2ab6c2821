//! Instruction-conditioned latent editor: a small convolutional noise
//! predictor trained with noise MSE plus an alignment term that pushes the
//! one-step-denoised latent's change embedding toward the instruction.

use std::fmt;

use iclip_numerics::{Graph, ParamMap, Real, RngStream, Tensor, Var};

use crate::backbone::{FeatureBackbone, FeatureStack, StackVars};
use crate::corpus::{parse_scene, Corpus, EditKind, Sample, Split, Tokens, CELL, GRID, IMG, PALETTE};
use crate::diffusion::{fd, rd_graph, rd_to, Codec, LatentState, NoiseSchedule, LATENT_C, LATENT_SIDE};
use crate::encoders::{change_graph, ChangeInput, IClip};
use crate::error::{CoreError, Result};
use crate::nn::{conv3, init_linear, linear, stack, timestep_batch, unstack};
use crate::train::{Batcher, Trainer};

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const SAMPLING_STEPS: usize = 20;
const CHUNK: usize = 100;

/// Which corpus and which loss an editor is trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Arm {
    Original,
    OriginalLoss,
    Refined,
    RefinedLoss,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Original, Arm::OriginalLoss, Arm::Refined, Arm::RefinedLoss];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Original => "orig",
            Arm::OriginalLoss => "orig+loss",
            Arm::Refined => "refined",
            Arm::RefinedLoss => "refined+loss",
        }
    }

    pub fn parse(s: &str) -> Result<Arm> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown arm `{s}` (expected orig, orig+loss, refined, refined+loss)")))
    }

    pub fn refined(self) -> bool {
        matches!(self, Arm::Refined | Arm::RefinedLoss)
    }

    pub fn lambda(self, lambda: f64) -> f64 {
        match self {
            Arm::OriginalLoss | Arm::RefinedLoss => lambda,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Convolutional noise predictor over `concat(Lᵒ, L̃ᵉ_k, r_k)`, modulated by
/// the timestep and the instruction embedding in every layer.
///
/// `r_k = L̃ᵉ_k − √ᾱ_k·Lᵒ` is what the noisy latent would be pure noise
/// around if the edit changed nothing, and `r_k/√(1−ᾱ_k)` the noise that
/// explains it. The output is `net + √(1−ᾱ_k)·r_k`: that prior weighted by
/// `1−ᾱ_k`, so it dominates at high noise (where it is nearly exact) and
/// fades at low noise (where dividing by `√(1−ᾱ_k)` would blow up any
/// edit). The network's residual target stays O(1) at every timestep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserSpec {
    pub hidden: usize,
    pub layers: usize,
    pub cond_width: usize,
}

impl DenoiserSpec {
    pub fn init(&self, seed: u64) -> ParamMap {
        let h = self.hidden;
        let mut rng = RngStream::new(seed, "denoiser-init");
        let mut p = ParamMap::new();
        init_linear(&mut p, &mut rng, "den.conv_in", 9 * 3 * LATENT_C, h, 1.0);
        init_linear(&mut p, &mut rng, "den.temb", h, h, 1.0);
        init_linear(&mut p, &mut rng, "den.cond", self.cond_width, h, 1.0);
        for i in 0..self.layers {
            init_linear(&mut p, &mut rng, &format!("den.film{i}"), h, 2 * h, 0.1);
            init_linear(&mut p, &mut rng, &format!("den.conv{i}"), 9 * h, h, 1.0 / (self.layers as f64).sqrt());
        }
        init_linear(&mut p, &mut rng, "den.out", h, LATENT_C, 0.1);
        p
    }

    /// Predicted noise `[B, 8, 8, 4]`. `cond` is `[B, cond_width]`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        schedule: &NoiseSchedule,
        original: Var,
        noisy: Var,
        ks: &[usize],
        cond: Var,
    ) -> iclip_numerics::Result<Var> {
        let b = ks.len();
        let (s, h) = (LATENT_SIDE, self.hidden);
        let mut a = Vec::with_capacity(b);
        let mut sigma = Vec::with_capacity(b);
        for &k in ks {
            if k == 0 || k > schedule.steps() {
                return Err(iclip_numerics::NumericsError::Config(format!(
                    "denoiser timestep {k} outside [1, {}]",
                    schedule.steps()
                )));
            }
            let (ak, bk) = schedule.coefficients(k);
            a.push(F::of(ak));
            sigma.push(F::of(bk));
        }
        let a = g.constant(Tensor::new(vec![b, 1, 1, 1], a)?);
        let sigma = g.constant(Tensor::new(vec![b, 1, 1, 1], sigma)?);
        let scaled = g.mul(original, a)?;
        let resid = g.sub(noisy, scaled)?;
        let prior = g.mul(resid, sigma)?;

        let x = g.concat(&[original, noisy, resid], 3)?;
        let mut z = conv3(g, x, "den.conv_in")?;
        let t = g.constant(timestep_batch(ks, schedule.steps(), h).cast());
        let t = linear(g, t, "den.temb")?;
        let c = linear(g, cond, "den.cond")?;
        let tc = g.add(t, c)?;
        let tc = g.gelu(tc)?;
        let bias = g.reshape(tc, &[b, 1, h])?;
        z = g.add(z, bias)?;
        z = g.gelu(z)?;
        for i in 0..self.layers {
            let film = linear(g, tc, &format!("den.film{i}"))?;
            let film = g.reshape(film, &[b, 1, 2 * h])?;
            let scale = g.narrow(film, 2, 0, h)?;
            let shift = g.narrow(film, 2, h, h)?;
            let y = g.reshape(z, &[b, s, s, h])?;
            let y = conv3(g, y, &format!("den.conv{i}"))?;
            let m = g.mul(y, scale)?;
            let y = g.add(y, m)?;
            let y = g.add(y, shift)?;
            let y = g.gelu(y)?;
            z = g.add(z, y)?;
        }
        let out = linear(g, z, "den.out")?;
        let out = g.reshape(out, &[b, s, s, LATENT_C])?;
        g.add(prior, out)
    }
}

/// Frozen models the alignment term reads through.
pub struct AlignmentContext<'a> {
    pub iclip: &'a IClip,
    pub schedule: &'a NoiseSchedule,
}

/// Loss pieces on the tape; `total = mse + λ·alignment` exactly.
#[derive(Clone, Copy, Debug)]
pub struct EditorLoss {
    pub total: Var,
    pub mse: Var,
    pub alignment: Option<Var>,
}

/// Both loss terms given a noise prediction. `noisy` holds `L̃ᵉ_k`,
/// `original_stacks` the backbone features of the clean `Lᵒ`, and
/// `instruction` the unit text embeddings of the instructions the
/// alignment term targets. The I-CLIP and backbone weights must already be
/// bound to `g` (non-trainable).
#[allow(clippy::too_many_arguments)]
pub fn editor_loss_from_prediction<F: Real>(
    g: &mut Graph<'_, F>,
    ctx: &AlignmentContext<'_>,
    predicted: Var,
    noise: Var,
    noisy: Var,
    ks: &[usize],
    original_stacks: &StackVars,
    instruction: Var,
    lambda: f64,
) -> iclip_numerics::Result<EditorLoss> {
    if let Some(k) = ks.iter().find(|&&k| k == 0) {
        return Err(iclip_numerics::NumericsError::Config(format!("editor loss needs k >= 1, got {k}")));
    }
    let mse = g.mse(predicted, noise)?;
    if lambda == 0.0 {
        return Ok(EditorLoss {
            total: mse,
            mse,
            alignment: None,
        });
    }
    let prev = rd_graph(g, ctx.schedule, noisy, predicted, ks)?;
    let prev_ks: Vec<usize> = ks.iter().map(|k| k - 1).collect();
    let edited = ctx.iclip.backbone.spec.forward(g, prev, Some(&prev_ks))?;
    let z = change_graph(g, original_stacks, &edited)?;
    let cos = g.cosine(z, instruction)?;
    let mean_cos = g.mean(cos)?;
    let neg = g.scale(mean_cos, F::of(-1.0))?;
    let alignment = g.add_scalar(neg, F::one())?;
    let weighted = g.scale(alignment, F::of(lambda))?;
    let total = g.add(mse, weighted)?;
    Ok(EditorLoss {
        total,
        mse,
        alignment: Some(alignment),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditorConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub lambda: f64,
    pub hidden: usize,
    pub layers: usize,
    /// Leading rows of each batch that carry the alignment term; the
    /// reconstruction term always sees the whole batch.
    pub align_batch: usize,
}

impl Default for EditorConfig {
    fn default() -> Self {
        EditorConfig {
            seed: 0,
            steps: 1200,
            batch: 32,
            lr: 1e-3,
            lambda: DEFAULT_LAMBDA,
            hidden: 48,
            layers: 2,
            align_batch: 8,
        }
    }
}

/// A trained noise predictor plus what it needs at inference.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub spec: DenoiserSpec,
    params: ParamMap,
}

impl Denoiser {
    pub fn new(spec: DenoiserSpec, params: ParamMap) -> Result<Denoiser> {
        for (name, t) in spec.init(0).iter() {
            if params.get(name).map(|p| p.shape()) != Some(t.shape()) {
                return Err(CoreError::Invalid(format!("denoiser checkpoint lacks `{name}` of shape {:?}", t.shape())));
            }
        }
        Ok(Denoiser {
            spec,
            params: params.with_prefix("den."),
        })
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn predict(
        &self,
        schedule: &NoiseSchedule,
        original: &[&Tensor], noisy: &[&Tensor], ks: &[usize], cond: &[&Tensor]) -> Result<Vec<Tensor>> {
        let mut g: Graph<f32> = Graph::new();
        g.bind(&self.params, false);
        let o = g.try_constant(stack(original))?;
        let x = g.try_constant(stack(noisy))?;
        let c = g.try_constant(stack(cond))?;
        let p = self.spec.forward(&mut g, schedule, o, x, ks, c)?;
        Ok(unstack(g.value(p)))
    }

    /// Deterministic sampling: Gaussian latents at `T` drawn from `seed`
    /// (one fork per item id), strided reverse steps down to `0`.
    pub fn sample(
        &self,
        schedule: &NoiseSchedule,
        original_latents: &[&Tensor],
        cond: &[&Tensor],
        ids: &[u64],
        steps: usize,
        seed: u64,
    ) -> Result<Vec<Tensor>> {
        let root = RngStream::new(seed, "editor-sampling");
        let mut states: Vec<LatentState> = ids
            .iter()
            .map(|&id| {
                let mut r = root.fork(id);
                LatentState {
                    latent: Tensor::from_fn(&[LATENT_SIDE, LATENT_SIDE, LATENT_C], |_| r.normal() as f32),
                    k: schedule.steps(),
                    noise: None,
                }
            })
            .collect();
        let mut ks = schedule.strided(steps);
        ks.push(0);
        for w in ks.windows(2) {
            let (k, j) = (w[0], w[1]);
            let noisy: Vec<&Tensor> = states.iter().map(|s| &s.latent).collect();
            let pred = self.predict(schedule, original_latents, &noisy, &vec![k; states.len()], cond)?;
            states = states
                .iter()
                .zip(&pred)
                .map(|(s, p)| rd_to(schedule, s, p, j))
                .collect::<Result<_>>()?;
        }
        Ok(states.into_iter().map(|s| s.latent).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditorReport {
    pub arm: Arm,
    pub seed: u64,
    pub lambda: f64,
    /// `(total, mse, alignment)` per step; alignment is 0 when λ = 0.
    pub losses: Vec<(f64, f64, f64)>,
}

/// Rows scaled to unit norm, as the denoiser's conditioning expects.
pub fn unit_rows(ts: Vec<Tensor>) -> Vec<Tensor> {
    ts.into_iter()
        .map(|t| {
            let n = t.data().iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() + iclip_numerics::COSINE_EPS;
            t.map(|v| (v as f64 / n) as f32)
        })
        .collect()
}

/// Reconstruction over the whole batch plus alignment over its first `a`
/// rows, an unbiased estimate of the full alignment term at a fraction of
/// the backbone cost.
#[allow(clippy::too_many_arguments)]
fn sub_batch_loss<F: Real>(
    g: &mut Graph<'_, F>,
    ctx: &AlignmentContext<'_>,
    pred: Var,
    noise: Var,
    noisy: Var,
    ks: &[usize],
    original_stacks: &StackVars,
    cond: Var,
    lambda: f64,
    a: usize,
) -> iclip_numerics::Result<EditorLoss> {
    if lambda == 0.0 || a >= ks.len() {
        return editor_loss_from_prediction(g, ctx, pred, noise, noisy, ks, original_stacks, cond, lambda);
    }
    let mse = g.mse(pred, noise)?;
    let os = StackVars {
        final_feature: g.narrow(original_stacks.final_feature, 0, 0, a)?,
        intermediates: original_stacks
            .intermediates
            .iter()
            .map(|&v| g.narrow(v, 0, 0, a))
            .collect::<iclip_numerics::Result<_>>()?,
    };
    let p = g.narrow(pred, 0, 0, a)?;
    let n = g.narrow(noise, 0, 0, a)?;
    let x = g.narrow(noisy, 0, 0, a)?;
    let c = g.narrow(cond, 0, 0, a)?;
    let part = editor_loss_from_prediction(g, ctx, p, n, x, &ks[..a], &os, c, lambda)?;
    let align = part.alignment.expect("lambda > 0");
    let weighted = g.scale(align, F::of(lambda))?;
    Ok(EditorLoss {
        total: g.add(mse, weighted)?,
        mse,
        alignment: Some(align),
    })
}

/// Trains a denoiser on the training split of `corpus` (whose stored
/// instructions are the arm's). Conditioning and the alignment target both
/// use the frozen I-CLIP text embedding of the stored instruction.
pub fn train_editor(
    corpus: &Corpus,
    split: Split,
    codec: &Codec,
    schedule: &NoiseSchedule,
    iclip: &IClip,
    arm: Arm,
    cfg: &EditorConfig,
) -> Result<(Denoiser, EditorReport)> {
    let lambda = arm.lambda(cfg.lambda);
    if !(lambda >= 0.0) {
        return Err(CoreError::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    let ids = split.train_ids();
    let samples: Vec<&Sample> = ids.iter().map(|&i| &corpus.samples[i]).collect();
    let lo = codec.encode(&samples.iter().map(|s| &s.original).collect::<Vec<_>>())?;
    let le = codec.encode(&samples.iter().map(|s| &s.edited).collect::<Vec<_>>())?;
    let text = unit_rows(iclip.encode_text(&samples.iter().map(|s| s.instruction).collect::<Vec<_>>())?);
    let ostacks: Vec<FeatureStack> = if lambda > 0.0 {
        let zeros = vec![0; lo.len()];
        iclip.backbone.features(&lo.iter().collect::<Vec<_>>(), Some(&zeros))?
    } else {
        Vec::new()
    };
    let spec = DenoiserSpec {
        hidden: cfg.hidden,
        layers: cfg.layers,
        cond_width: text[0].numel(),
    };
    let frozen: ParamMap = {
        let mut p = iclip.params().clone();
        p.extend(iclip.backbone.params().clone());
        p
    };
    let ctx = AlignmentContext { iclip, schedule };
    let mut trainer = Trainer::new(spec.init(cfg.seed), cfg.lr, "train-editor", cfg.seed)?;
    let mut batcher = Batcher::new((0..samples.len()).collect(), RngStream::new(cfg.seed, "editor-batches"))?;
    let mut k_rng = RngStream::new(cfg.seed, "editor-timesteps");
    let mut noise_rng = RngStream::new(cfg.seed, "editor-noise");
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = batcher.next_batch(cfg.batch);
        let ks: Vec<usize> = batch.iter().map(|_| 1 + k_rng.below(schedule.steps())).collect();
        let mut noises = Vec::with_capacity(batch.len());
        let mut noisy = Vec::with_capacity(batch.len());
        for (&i, &k) in batch.iter().zip(&ks) {
            let n = Tensor::from_fn(le[i].shape(), |_| noise_rng.normal() as f32);
            noisy.push(fd(schedule, &le[i], &n, k)?.latent);
            noises.push(n);
        }
        let (vals, grads) = {
            let mut g: Graph<f32> = Graph::new();
            g.bind(trainer.params(), true);
            g.bind(&frozen, false);
            let o = g.constant(stack(&batch.iter().map(|&i| &lo[i]).collect::<Vec<_>>()));
            let x = g.constant(stack(&noisy.iter().collect::<Vec<_>>()));
            let n = g.constant(stack(&noises.iter().collect::<Vec<_>>()));
            let c = g.constant(stack(&batch.iter().map(|&i| &text[i]).collect::<Vec<_>>()));
            let pred = trainer.check(step, spec.forward(&mut g, schedule, o, x, &ks, c))?;
            let os = if lambda > 0.0 {
                StackVars::constant(&mut g, &batch.iter().map(|&i| &ostacks[i]).collect::<Vec<_>>())
            } else {
                StackVars {
                    final_feature: o,
                    intermediates: Vec::new(),
                }
            };
            let a = cfg.align_batch.min(batch.len());
            let l = trainer.check(step, sub_batch_loss(&mut g, &ctx, pred, n, x, &ks, &os, c, lambda, a))?;
            let grads = trainer.check(step, g.backward(l.total))?;
            let val = |v: Var| g.value(v).item() as f64;
            ((val(l.total), val(l.mse), l.alignment.map_or(0.0, val)), grads.params)
        };
        trainer.step(step, vals.0 as f32, grads)?;
        losses.push(vals);
    }
    Ok((
        Denoiser::new(spec, trainer.into_params())?,
        EditorReport {
            arm,
            seed: cfg.seed,
            lambda,
            losses,
        },
    ))
}

/// Per-sample evaluation of an edit.
#[derive(Clone, Debug, PartialEq)]
pub struct EditScores {
    pub id: usize,
    pub edit_mse: f64,
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino_i: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: Vec<EditScores>,
    pub edit_mse: f64,
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino_i: f64,
    /// Over recolor-shape samples: fraction of target-shape pixels whose
    /// output is closer to the requested color than to the old one.
    pub recolor_hit_rate: Option<f64>,
}

/// Desk-scale metric analogues: text alignment through I-CLIP, image
/// similarity through the teacher's pooled and per-block features.
pub fn eval_metrics(
    originals: &[&Tensor],
    outputs: &[&Tensor],
    targets: &[&Tensor],
    instructions: &[Tokens],
    ids: &[usize],
    teacher: &FeatureBackbone,
    iclip: &IClip,
    codec: &Codec,
) -> Result<Vec<EditScores>> {
    let lo = codec.encode(originals)?;
    let lout = codec.encode(outputs)?;
    let o: Vec<ChangeInput> = lo.iter().map(|l| ChangeInput::Latent(l, 0)).collect();
    let e: Vec<ChangeInput> = lout.iter().map(|l| ChangeInput::Latent(l, 0)).collect();
    let zv = iclip.encode_change(&o, &e)?;
    let zt = iclip.encode_text(instructions)?;
    let fo = teacher.features(outputs, None)?;
    let ft = teacher.features(targets, None)?;
    let cos = |a: &Tensor, b: &Tensor| iclip_numerics::cosine(a.data(), b.data()) as f64;
    Ok((0..outputs.len())
        .map(|i| {
            let edit_mse = outputs[i]
                .data()
                .iter()
                .zip(targets[i].data())
                .map(|(a, b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / outputs[i].numel() as f64;
            let layers = fo[i].intermediates.len().max(1) as f64;
            EditScores {
                id: ids[i],
                edit_mse,
                clip_t: cos(&zv[i], &zt[i]),
                clip_i: cos(&fo[i].final_feature, &ft[i].final_feature),
                dino_i: fo[i]
                    .intermediates
                    .iter()
                    .zip(&ft[i].intermediates)
                    .map(|(a, b)| cos(a, b))
                    .sum::<f64>()
                    / layers,
            }
        })
        .collect())
}

/// Pixel oracle for recolor edits: share of target-shape pixels moved
/// closer to the new color than to the old one. `None` for other edits.
pub fn recolor_hits(sample: &Sample, output: &Tensor) -> Option<(usize, usize)> {
    let before = parse_scene(&sample.original)?;
    let after = parse_scene(&sample.edited)?;
    let changed: Vec<_> = before
        .shapes
        .iter()
        .filter_map(|s| after.shape(s.kind).filter(|a| a.cell == s.cell && a.color != s.color).map(|a| (*s, a.color)))
        .collect();
    if changed.len() != 1 || before.shapes.len() != after.shapes.len() || before.background != after.background {
        return None;
    }
    let (shape, new_color) = changed[0];
    let (cy, cx) = ((shape.cell / GRID) * CELL, (shape.cell % GRID) * CELL);
    let (old, new) = (PALETTE[shape.color], PALETTE[new_color]);
    let dist = |p: &[f32], c: [f32; 3]| p.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f32>();
    let (mut hits, mut total) = (0, 0);
    for y in 0..CELL {
        for x in 0..CELL {
            if shape.kind.covers(y, x) {
                let i = ((cy + y) * IMG + cx + x) * 3;
                let p = &output.data()[i..i + 3];
                total += 1;
                if dist(p, new) < dist(p, old) {
                    hits += 1;
                }
            }
        }
    }
    Some((hits, total))
}

/// Edits every holdout sample with its ground-truth instruction and scores
/// the result against the ground-truth edited image.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_editor(
    denoiser: &Denoiser,
    corpus: &Corpus,
    ids: &[usize],
    codec: &Codec,
    schedule: &NoiseSchedule,
    iclip: &IClip,
    teacher: &FeatureBackbone,
    seed: u64,
    sampling_steps: usize,
) -> Result<(EvalReport, Vec<Tensor>)> {
    let mut outputs = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(CHUNK) {
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &corpus.samples[i]).collect();
        let lo = codec.encode(&samples.iter().map(|s| &s.original).collect::<Vec<_>>())?;
        let text = unit_rows(iclip.encode_text(&samples.iter().map(|s| s.gt_instruction).collect::<Vec<_>>())?);
        let lat = denoiser.sample(
            schedule,
            &lo.iter().collect::<Vec<_>>(),
            &text.iter().collect::<Vec<_>>(),
            &chunk.iter().map(|&i| i as u64).collect::<Vec<_>>(),
            sampling_steps,
            seed,
        )?;
        outputs.extend(codec.decode(&lat.iter().collect::<Vec<_>>())?);
    }
    let samples: Vec<&Sample> = ids.iter().map(|&i| &corpus.samples[i]).collect();
    let scores = eval_metrics(
        &samples.iter().map(|s| &s.original).collect::<Vec<_>>(),
        &outputs.iter().collect::<Vec<_>>(),
        &samples.iter().map(|s| &s.edited).collect::<Vec<_>>(),
        &samples.iter().map(|s| s.gt_instruction).collect::<Vec<_>>(),
        ids,
        teacher,
        iclip,
        codec,
    )?;
    let (mut hits, mut total) = (0, 0);
    for (s, out) in samples.iter().zip(&outputs) {
        if let Some((h, t)) = recolor_hits(s, out) {
            hits += h;
            total += t;
        }
    }
    let n = scores.len().max(1) as f64;
    let mean = |f: fn(&EditScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let report = EvalReport {
        edit_mse: mean(|s| s.edit_mse),
        clip_t: mean(|s| s.clip_t),
        clip_i: mean(|s| s.clip_i),
        dino_i: mean(|s| s.dino_i),
        recolor_hit_rate: (total > 0).then(|| hits as f64 / total as f64),
        samples: scores,
    };
    Ok((report, outputs))
}

/// Recolor kinds are the ones the pixel oracle can grade.
pub fn is_recolor(kind: EditKind) -> bool {
    matches!(kind, EditKind::RecolorShape)
}
