//! Feature backbones: the image-mode teacher, trained on scene attributes,
//! and the latent-mode student distilled from it on noisy latents.
//!
//! Both split their input into a 4×4 grid of patches (8×8 pixels, or 2×2
//! latent cells), so every intermediate output is `[16, width]` and the two
//! modes line up token for token.

use iclip_numerics::{Graph, ParamMap, Real, RngStream, Tensor, Var};

use crate::corpus::{parse_scene, Corpus, ShapeKind, Split, CHANNELS, IMG, N_COLORS};
use crate::diffusion::{fd, Codec, NoiseSchedule, LATENT_C, LATENT_SIDE};
use crate::error::{CoreError, Result};
use crate::nn::{
    block, init_block, init_embedding, init_linear, init_ln, layer_norm, linear, patchify_index, stack,
    timestep_batch, Arch,
};
use crate::train::{Batcher, Trainer};

pub const TOKENS: usize = 16;
const IMAGE_PATCH: usize = IMG / 4;
const LATENT_PATCH: usize = LATENT_SIDE / 4;
const CHUNK: usize = 128;
const HEAD: &str = "teacher_head";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    Image,
    /// Noisy latent plus its timestep.
    Latent,
}

impl InputMode {
    pub fn prefix(self) -> &'static str {
        match self {
            InputMode::Image => "teacher",
            InputMode::Latent => "ld",
        }
    }

    fn patch_dim(self) -> usize {
        match self {
            InputMode::Image => IMAGE_PATCH * IMAGE_PATCH * CHANNELS,
            InputMode::Latent => LATENT_PATCH * LATENT_PATCH * LATENT_C,
        }
    }
}

/// One sample's features: pooled final vector and one `[16, width]`
/// tensor per block.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub final_feature: Tensor,
    pub intermediates: Vec<Tensor>,
}

/// Batched features on a tape: `final_feature[B, W]`, intermediates
/// `[B, 16, W]`.
#[derive(Clone, Debug)]
pub struct StackVars {
    pub final_feature: Var,
    pub intermediates: Vec<Var>,
}

impl StackVars {
    /// Moves per-sample stacks onto the tape as constants.
    pub fn constant<F: Real>(g: &mut Graph<'_, F>, stacks: &[&FeatureStack]) -> StackVars {
        let fin = stack(&stacks.iter().map(|s| &s.final_feature).collect::<Vec<_>>());
        let layers = stacks.first().map_or(0, |s| s.intermediates.len());
        let intermediates = (0..layers)
            .map(|i| g.constant(stack(&stacks.iter().map(|s| &s.intermediates[i]).collect::<Vec<_>>()).cast()))
            .collect();
        StackVars {
            final_feature: g.constant(fin.cast()),
            intermediates,
        }
    }

    pub fn layers(&self) -> usize {
        self.intermediates.len()
    }
}

/// Shape of a backbone, independent of its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneSpec {
    pub mode: InputMode,
    pub arch: Arch,
    /// Schedule length used to scale timestep embeddings (latent mode).
    pub t_max: usize,
}

impl BackboneSpec {
    pub fn init(&self, seed: u64) -> ParamMap {
        let p = self.mode.prefix();
        let w = self.arch.width;
        let mut rng = RngStream::new(seed, &format!("{p}-init"));
        let mut params = ParamMap::new();
        init_linear(&mut params, &mut rng, &format!("{p}.embed"), self.mode.patch_dim(), w, 1.0);
        init_embedding(&mut params, &mut rng, &format!("{p}.pos"), TOKENS, w, 0.02);
        if self.mode == InputMode::Latent {
            init_linear(&mut params, &mut rng, &format!("{p}.temb"), w, w, 1.0);
        }
        for i in 0..self.arch.layers {
            init_block(&mut params, &mut rng, &format!("{p}.block{i}"), self.arch);
        }
        init_ln(&mut params, &format!("{p}.ln_f"), w);
        params
    }

    /// `x` is `[B, 32, 32, 3]` (image) or `[B, 8, 8, 4]` (latent); latent
    /// mode needs one timestep per row.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, ks: Option<&[usize]>) -> iclip_numerics::Result<StackVars> {
        let p = self.mode.prefix();
        let s = g.shape(x).to_vec();
        let b = s[0];
        let (side, c, patch) = match self.mode {
            InputMode::Image => (IMG, CHANNELS, IMAGE_PATCH),
            InputMode::Latent => (LATENT_SIDE, LATENT_C, LATENT_PATCH),
        };
        if s[1..] != [side, side, c] {
            return Err(iclip_numerics::NumericsError::ShapeMismatch {
                op: "backbone input",
                lhs: s,
                rhs: vec![b, side, side, c],
            });
        }
        let temb = match (self.mode, ks) {
            (InputMode::Image, None) => None,
            (InputMode::Latent, Some(ks)) if ks.len() == b => {
                let e = g.constant(timestep_batch(ks, self.t_max, self.arch.width).cast());
                let e = linear(g, e, &format!("{p}.temb"))?;
                Some(g.reshape(e, &[b, 1, self.arch.width])?)
            }
            _ => {
                return Err(iclip_numerics::NumericsError::Config(format!(
                    "{:?} backbone called with {} timesteps for batch {b}",
                    self.mode,
                    ks.map_or(0, |k| k.len())
                )))
            }
        };
        let patches = g.gather(x, patchify_index(b, side, c, patch), &[b, TOKENS, self.mode.patch_dim()])?;
        let h = linear(g, patches, &format!("{p}.embed"))?;
        let pos = g.param(&format!("{p}.pos"))?;
        let mut h = g.add(h, pos)?;
        let mut intermediates = Vec::with_capacity(self.arch.layers);
        for i in 0..self.arch.layers {
            if let Some(t) = temb {
                h = g.add(h, t)?;
            }
            h = block(g, h, &format!("{p}.block{i}"), None)?;
            intermediates.push(h);
        }
        let f = layer_norm(g, h, &format!("{p}.ln_f"))?;
        let final_feature = g.mean_axis(f, 1)?;
        Ok(StackVars {
            final_feature,
            intermediates,
        })
    }
}

/// A frozen backbone.
#[derive(Clone, Debug)]
pub struct FeatureBackbone {
    pub spec: BackboneSpec,
    params: ParamMap,
}

impl FeatureBackbone {
    pub fn new(spec: BackboneSpec, params: ParamMap) -> Result<FeatureBackbone> {
        let p = spec.mode.prefix();
        let expected = spec.init(0);
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(have) if have.shape() == t.shape() => {}
                Some(have) => {
                    return Err(CoreError::Invalid(format!(
                        "{name}: shape {:?}, expected {:?}",
                        have.shape(),
                        t.shape()
                    )))
                }
                None => return Err(CoreError::Invalid(format!("{p} checkpoint lacks `{name}`"))),
            }
        }
        Ok(FeatureBackbone {
            spec,
            params: params.with_prefix(&format!("{p}.")),
        })
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    /// Features on an existing tape; the weights enter as constants.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, ks: Option<&[usize]>) -> iclip_numerics::Result<StackVars> {
        g.bind_owned(self.params.cast(), false);
        self.spec.forward(g, x, ks)
    }

    /// Off-tape features for each input.
    pub fn features(&self, inputs: &[&Tensor], ks: Option<&[usize]>) -> Result<Vec<FeatureStack>> {
        let mut out = Vec::with_capacity(inputs.len());
        for (c, chunk) in inputs.chunks(CHUNK).enumerate() {
            let mut g: Graph<f32> = Graph::new();
            g.bind(&self.params, false);
            let x = g.try_constant(stack(chunk))?;
            let ks = ks.map(|k| &k[c * CHUNK..c * CHUNK + chunk.len()]);
            let s = self.spec.forward(&mut g, x, ks)?;
            let fin = crate::nn::unstack(g.value(s.final_feature));
            let inter: Vec<Vec<Tensor>> = s.intermediates.iter().map(|v| crate::nn::unstack(g.value(*v))).collect();
            for (i, f) in fin.into_iter().enumerate() {
                out.push(FeatureStack {
                    final_feature: f,
                    intermediates: inter.iter().map(|l| l[i].clone()).collect(),
                });
            }
        }
        Ok(out)
    }
}

/// Per-row distillation loss `[B]`:
/// `1 − cos(final) + (1/l)·Σᵢ (1 − cos(flatten(interᵢ)))`.
pub fn lddino_rows<F: Real>(g: &mut Graph<'_, F>, student: &StackVars, teacher: &StackVars) -> iclip_numerics::Result<Var> {
    let l = student.layers();
    if l != teacher.layers() || l == 0 {
        return Err(iclip_numerics::NumericsError::Config(format!(
            "feature stacks have {l} and {} layers",
            teacher.layers()
        )));
    }
    let fc = g.cosine(student.final_feature, teacher.final_feature)?;
    let mut acc = g.scale(fc, F::of(-1.0))?;
    for (s, t) in student.intermediates.iter().zip(&teacher.intermediates) {
        let shape = g.shape(*s).to_vec();
        let flat = [shape[0], shape[1..].iter().product()];
        let s = g.reshape(*s, &flat)?;
        let t = g.reshape(*t, &flat)?;
        let c = g.cosine(s, t)?;
        let c = g.scale(c, F::of(-1.0 / l as f64))?;
        acc = g.add(acc, c)?;
    }
    g.add_scalar(acc, F::of(2.0))
}

/// Batch mean of [`lddino_rows`].
pub fn lddino_graph<F: Real>(g: &mut Graph<'_, F>, student: &StackVars, teacher: &StackVars) -> iclip_numerics::Result<Var> {
    let rows = lddino_rows(g, student, teacher)?;
    g.mean(rows)
}

/// Distillation loss between two single-sample stacks, in double precision.
pub fn lddino_loss(student: &FeatureStack, teacher: &FeatureStack) -> Result<f64> {
    if student.intermediates.len() != teacher.intermediates.len() {
        return Err(CoreError::Invalid(format!(
            "feature stacks have {} and {} layers",
            student.intermediates.len(),
            teacher.intermediates.len()
        )));
    }
    let mut g: Graph<f64> = Graph::new();
    let s = StackVars::constant(&mut g, &[student]);
    let t = StackVars::constant(&mut g, &[teacher]);
    let l = lddino_graph(&mut g, &s, &t)?;
    Ok(g.value(l).item())
}

// ---- teacher ---------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub arch: Arch,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            seed: 0,
            steps: 1200,
            batch: 32,
            lr: 1e-3,
            arch: Arch::DEFAULT,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherReport {
    pub steps: usize,
    pub final_loss: f64,
    /// Holdout accuracy of the background head, then one per shape kind.
    pub head_accuracy: Vec<f64>,
    pub macro_accuracy: f64,
}

/// Attribute targets: background color, then for each shape kind its color
/// or `N_COLORS` when absent.
fn attributes(img: &Tensor) -> Result<[usize; 4]> {
    let scene = parse_scene(img).ok_or_else(|| CoreError::Invalid("teacher input is not a clean render".into()))?;
    let mut out = [scene.background, N_COLORS, N_COLORS, N_COLORS];
    for s in &scene.shapes {
        out[1 + s.kind.index()] = s.color;
    }
    Ok(out)
}

fn head_names() -> Vec<(String, usize)> {
    let mut v = vec![(format!("{HEAD}.background"), N_COLORS)];
    v.extend(ShapeKind::ALL.iter().map(|k| (format!("{HEAD}.{}", k.name()), N_COLORS + 1)));
    v
}

fn head_logits<F: Real>(g: &mut Graph<'_, F>, d: Var) -> iclip_numerics::Result<Vec<Var>> {
    head_names().iter().map(|(n, _)| linear(g, d, n)).collect()
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, v)| if *v > bv { (i, *v) } else { (bi, bv) })
        .0
}

/// Trains the image-mode backbone with attribute heads on originals and
/// edits of the training split, then drops the heads and freezes it.
pub fn train_teacher(corpus: &Corpus, split: Split, cfg: &TeacherConfig) -> Result<(FeatureBackbone, TeacherReport)> {
    let spec = BackboneSpec {
        mode: InputMode::Image,
        arch: cfg.arch,
        t_max: 0,
    };
    let images = |ids: Vec<usize>| -> Vec<&Tensor> {
        ids.iter()
            .flat_map(|&i| [&corpus.samples[i].original, &corpus.samples[i].edited])
            .collect()
    };
    let train = images(split.train_ids());
    let labels = train.iter().map(|t| attributes(t)).collect::<Result<Vec<_>>>()?;
    let mut params = spec.init(cfg.seed);
    let mut rng = RngStream::new(cfg.seed, "teacher-head-init");
    for (name, classes) in head_names() {
        init_linear(&mut params, &mut rng, &name, cfg.arch.width, classes, 1.0);
    }
    let mut trainer = Trainer::new(params, cfg.lr, "train-teacher", cfg.seed)?;
    let mut batcher = Batcher::new((0..train.len()).collect(), RngStream::new(cfg.seed, "teacher-batches"))?;
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let ids = batcher.next_batch(cfg.batch);
        let x = stack(&ids.iter().map(|&i| train[i]).collect::<Vec<_>>());
        let (loss, grads) = {
            let mut g: Graph<f32> = Graph::new();
            g.bind(trainer.params(), true);
            let xv = g.constant(x);
            let feats = trainer.check(step, spec.forward(&mut g, xv, None))?;
            let logits = trainer.check(step, head_logits(&mut g, feats.final_feature))?;
            let ones = vec![1.0f32; ids.len()];
            let mut total = None;
            for (h, lg) in logits.into_iter().enumerate() {
                let targets: Vec<usize> = ids.iter().map(|&i| labels[i][h]).collect();
                let ce = trainer.check(step, g.cross_entropy(lg, &targets, &ones))?;
                total = Some(match total {
                    None => ce,
                    Some(t) => trainer.check(step, g.add(t, ce))?,
                });
            }
            let l = total.expect("four heads");
            let grads = trainer.check(step, g.backward(l))?;
            (g.value(l).item(), grads.params)
        };
        trainer.step(step, loss, grads)?;
        last = loss as f64;
    }
    let params = trainer.into_params();

    let holdout = images(split.holdout_ids());
    let mut correct = [0usize; 4];
    for chunk in holdout.chunks(CHUNK) {
        let mut g: Graph<f32> = Graph::new();
        g.bind(&params, false);
        let x = g.try_constant(stack(chunk))?;
        let feats = spec.forward(&mut g, x, None)?;
        let logits = head_logits(&mut g, feats.final_feature)?;
        for (i, img) in chunk.iter().enumerate() {
            let truth = attributes(img)?;
            for (h, lg) in logits.iter().enumerate() {
                let t = g.value(*lg);
                let c = t.shape()[1];
                if argmax(&t.data()[i * c..(i + 1) * c]) == truth[h] {
                    correct[h] += 1;
                }
            }
        }
    }
    let head_accuracy: Vec<f64> = correct.iter().map(|c| *c as f64 / holdout.len().max(1) as f64).collect();
    let macro_accuracy = head_accuracy.iter().sum::<f64>() / head_accuracy.len() as f64;
    let backbone = FeatureBackbone::new(spec, params)?;
    Ok((
        backbone,
        TeacherReport {
            steps: cfg.steps,
            final_loss: last,
            head_accuracy,
            macro_accuracy,
        },
    ))
}

// ---- latent student ----------------------------------------------------------

/// Three-phase timestep curriculum: the first tenth of the steps uses
/// `k = 0`, the next eight tenths raise the sampling upper bound linearly to
/// `T`, and the last tenth samples the full range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Curriculum {
    pub steps: usize,
    pub t_max: usize,
}

impl Curriculum {
    fn bounds(&self) -> (usize, usize) {
        (self.steps / 10, self.steps - self.steps / 10)
    }

    /// Largest timestep that may be drawn at `step`.
    pub fn upper_bound(&self, step: usize) -> usize {
        let (warm, ramp_end) = self.bounds();
        if step < warm {
            0
        } else if step < ramp_end {
            self.t_max * (step - warm + 1) / (ramp_end - warm)
        } else {
            self.t_max
        }
    }

    pub fn sample(&self, step: usize, rng: &mut RngStream) -> usize {
        rng.below(self.upper_bound(step) + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for LdConfig {
    fn default() -> Self {
        LdConfig {
            seed: 0,
            steps: 1500,
            batch: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LdReport {
    pub steps: usize,
    pub final_loss: f64,
    /// `(step, upper bound, drawn k, loss)` per training step.
    pub trace: Vec<(usize, usize, usize, f64)>,
    /// Holdout loss at `k = 0` before training.
    pub init_loss_k0: f64,
    pub holdout_loss_k0: f64,
    pub holdout_loss_kmax: f64,
    /// Mean final-feature cosine to the teacher at `k = 0`.
    pub holdout_cosine_k0: f64,
}

/// Clean latents and teacher targets for the originals and edits of `ids`.
struct Paired {
    latents: Vec<Tensor>,
    targets: Vec<FeatureStack>,
}

fn paired(corpus: &Corpus, ids: &[usize], teacher: &FeatureBackbone, codec: &Codec) -> Result<Paired> {
    let images: Vec<&Tensor> = ids
        .iter()
        .flat_map(|&i| [&corpus.samples[i].original, &corpus.samples[i].edited])
        .collect();
    Ok(Paired {
        latents: codec.encode(&images)?,
        targets: teacher.features(&images, None)?,
    })
}

/// Mean loss and mean final cosine of `params` on `data` at a fixed timestep.
fn evaluate_student(
    spec: &BackboneSpec,
    params: &ParamMap,
    data: &Paired,
    schedule: &NoiseSchedule,
    k: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let rng = RngStream::new(seed, "ld-eval");
    let noisy: Vec<Tensor> = data
        .latents
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut r = rng.fork(i as u64);
            let n = Tensor::from_fn(l.shape(), |_| r.normal() as f32);
            Ok(fd(schedule, l, &n, k)?.latent)
        })
        .collect::<Result<_>>()?;
    let (mut loss, mut cos) = (0.0, 0.0);
    for (c, chunk) in noisy.chunks(CHUNK).enumerate() {
        let mut g: Graph<f32> = Graph::new();
        g.bind(params, false);
        let x = g.try_constant(stack(&chunk.iter().collect::<Vec<_>>()))?;
        let ks = vec![k; chunk.len()];
        let s = spec.forward(&mut g, x, Some(&ks))?;
        let targets: Vec<&FeatureStack> = data.targets[c * CHUNK..c * CHUNK + chunk.len()].iter().collect();
        let t = StackVars::constant(&mut g, &targets);
        let rows = lddino_rows(&mut g, &s, &t)?;
        loss += g.value(rows).data().iter().map(|v| *v as f64).sum::<f64>();
        let fc = g.cosine(s.final_feature, t.final_feature)?;
        cos += g.value(fc).data().iter().map(|v| *v as f64).sum::<f64>();
    }
    let n = noisy.len().max(1) as f64;
    Ok((loss / n, cos / n))
}

/// Distils the frozen teacher into a latent-mode student: the student sees
/// `fd(encode(I), N, k)` and `k`, the target is `teacher(I)`. One timestep is
/// drawn per step from the curriculum.
pub fn train_ld_student(
    teacher: &FeatureBackbone,
    codec: &Codec,
    schedule: &NoiseSchedule,
    corpus: &Corpus,
    split: Split,
    cfg: &LdConfig,
) -> Result<(FeatureBackbone, LdReport)> {
    if teacher.spec.mode != InputMode::Image {
        return Err(CoreError::Config("the distillation teacher must be an image-mode backbone".into()));
    }
    let spec = BackboneSpec {
        mode: InputMode::Latent,
        arch: teacher.spec.arch,
        t_max: schedule.steps(),
    };
    let train = paired(corpus, &split.train_ids(), teacher, codec)?;
    let holdout = paired(corpus, &split.holdout_ids(), teacher, codec)?;

    // Transformer blocks start from the teacher's weights; the patch and
    // timestep embeddings are new.
    let mut params = spec.init(cfg.seed);
    for (name, t) in teacher.params().iter() {
        let suffix = name.strip_prefix("teacher.").expect("teacher prefix");
        if suffix.starts_with("block") || suffix.starts_with("ln_f") || suffix == "pos" {
            params.insert(format!("ld.{suffix}"), t.clone());
        }
    }
    let (init_loss_k0, _) = evaluate_student(&spec, &params, &holdout, schedule, 0, cfg.seed)?;

    let curriculum = Curriculum {
        steps: cfg.steps,
        t_max: schedule.steps(),
    };
    let mut trainer = Trainer::new(params, cfg.lr, "train-ld", cfg.seed)?;
    let mut batcher = Batcher::new((0..train.latents.len()).collect(), RngStream::new(cfg.seed, "ld-batches"))?;
    let mut k_rng = RngStream::new(cfg.seed, "ld-timesteps");
    let mut noise_rng = RngStream::new(cfg.seed, "ld-noise");
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let ub = curriculum.upper_bound(step);
        let k = curriculum.sample(step, &mut k_rng);
        let ids = batcher.next_batch(cfg.batch);
        let noisy = ids
            .iter()
            .map(|&i| {
                let l = &train.latents[i];
                let n = Tensor::from_fn(l.shape(), |_| noise_rng.normal() as f32);
                Ok(fd(schedule, l, &n, k)?.latent)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = {
            let mut g: Graph<f32> = Graph::new();
            g.bind(trainer.params(), true);
            let x = g.constant(stack(&noisy.iter().collect::<Vec<_>>()));
            let ks = vec![k; ids.len()];
            let s = trainer.check(step, spec.forward(&mut g, x, Some(&ks)))?;
            let targets: Vec<&FeatureStack> = ids.iter().map(|&i| &train.targets[i]).collect();
            let t = StackVars::constant(&mut g, &targets);
            let l = trainer.check(step, lddino_graph(&mut g, &s, &t))?;
            let grads = trainer.check(step, g.backward(l))?;
            (g.value(l).item(), grads.params)
        };
        trainer.step(step, loss, grads)?;
        last = loss as f64;
        trace.push((step, ub, k, last));
    }
    let params = trainer.into_params();
    let (holdout_loss_k0, holdout_cosine_k0) = evaluate_student(&spec, &params, &holdout, schedule, 0, cfg.seed)?;
    let (holdout_loss_kmax, _) = evaluate_student(&spec, &params, &holdout, schedule, schedule.steps(), cfg.seed)?;
    Ok((
        FeatureBackbone::new(spec, params)?,
        LdReport {
            steps: cfg.steps,
            final_loss: last,
            trace,
            init_loss_k0,
            holdout_loss_k0,
            holdout_loss_kmax,
            holdout_cosine_k0,
        },
    ))
}
