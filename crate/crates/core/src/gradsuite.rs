//! Finite-difference checks of the composite training losses at toy width:
//! the editor objective through the reverse step, the contrastive
//! trunk/text towers, the latent distillation loss and the decoder.

use iclip_numerics::{fd_check, Graph, Objective, ParamMap, Real, RngStream, Tensor, Var};

use crate::backbone::{lddino_graph, BackboneSpec, FeatureBackbone, FeatureStack, InputMode, StackVars};
use crate::corpus::{instruction_space, Tokens};
use crate::decoder::{decap_targets, decoder_logits, init_decoder};
use crate::diffusion::{fd, NoiseSchedule, LATENT_C, LATENT_SIDE};
use crate::editor::{editor_loss_from_prediction, AlignmentContext, DenoiserSpec};
use crate::encoders::{change_graph, contrastive_graph, init_iclip, text_graph, IClip, LOG_TAU};
use crate::error::Result;
use crate::nn::{stack, Arch};

const TINY: Arch = Arch { width: 8, layers: 2 };
const BATCH: usize = 3;
const COORDS: usize = 4;
/// Central step for the composite objectives.
pub const MODEL_FD_STEP: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct ModelSuiteRow {
    pub objective: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
}

fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal() as f32)
}

fn random_tokens(rng: &mut RngStream, n: usize) -> Vec<Tokens> {
    let space = instruction_space();
    (0..n).map(|_| space[rng.below(space.len())]).collect()
}

fn stacked(ts: &[Tensor]) -> Tensor {
    stack(&ts.iter().collect::<Vec<_>>())
}

fn tiny_ld(seed: u64) -> Result<FeatureBackbone> {
    let spec = BackboneSpec {
        mode: InputMode::Latent,
        arch: TINY,
        t_max: 50,
    };
    FeatureBackbone::new(spec, spec.init(seed))
}

struct EditorCase {
    iclip: IClip,
    schedule: NoiseSchedule,
    spec: DenoiserSpec,
    original: Tensor,
    noisy: Tensor,
    noise: Tensor,
    text: Tensor,
    ks: Vec<usize>,
    stacks: Vec<FeatureStack>,
}

impl EditorCase {
    fn new(seed: u64) -> Result<(EditorCase, ParamMap)> {
        let mut rng = RngStream::new(seed, "gradsuite-editor");
        let schedule = NoiseSchedule::linear(50)?;
        let iclip = IClip::new(init_iclip(TINY, seed), tiny_ld(seed)?)?;
        let shape = [LATENT_SIDE, LATENT_SIDE, LATENT_C];
        let original: Vec<Tensor> = (0..BATCH).map(|_| randn(&mut rng, &shape)).collect();
        let noise: Vec<Tensor> = (0..BATCH).map(|_| randn(&mut rng, &shape)).collect();
        let ks: Vec<usize> = (0..BATCH).map(|_| 1 + rng.below(schedule.steps())).collect();
        let mut noisy = Vec::with_capacity(BATCH);
        for i in 0..BATCH {
            noisy.push(fd(&schedule, &randn(&mut rng, &shape), &noise[i], ks[i])?.latent);
        }
        let stacks = iclip.backbone.features(&original.iter().collect::<Vec<_>>(), Some(&[0; BATCH]))?;
        let text = iclip.encode_text(&random_tokens(&mut rng, BATCH))?;
        let spec = DenoiserSpec {
            hidden: 8,
            layers: 1,
            cond_width: TINY.width,
        };
        let params = spec.init(seed);
        Ok((
            EditorCase {
                iclip,
                schedule,
                spec,
                original: stacked(&original),
                noisy: stacked(&noisy),
                noise: stacked(&noise),
                text: stacked(&text),
                ks,
                stacks,
            },
            params,
        ))
    }
}

impl Objective for EditorCase {
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> iclip_numerics::Result<Var> {
        g.bind_owned(self.iclip.params().cast(), false);
        g.bind_owned(self.iclip.backbone.params().cast(), false);
        let o = g.constant(self.original.cast());
        let x = g.constant(self.noisy.cast());
        let n = g.constant(self.noise.cast());
        let t = g.constant(self.text.cast());
        let pred = self.spec.forward(g, &self.schedule, o, x, &self.ks, t)?;
        let os = StackVars::constant(g, &self.stacks.iter().collect::<Vec<_>>());
        let ctx = AlignmentContext {
            iclip: &self.iclip,
            schedule: &self.schedule,
        };
        Ok(editor_loss_from_prediction(g, &ctx, pred, n, x, &self.ks, &os, t, 1.0)?.total)
    }
}

fn random_stack(rng: &mut RngStream) -> FeatureStack {
    FeatureStack {
        final_feature: randn(rng, &[TINY.width]),
        intermediates: (0..TINY.layers).map(|_| randn(rng, &[16, TINY.width])).collect(),
    }
}

struct ContrastiveCase {
    original: Vec<FeatureStack>,
    edited: Vec<FeatureStack>,
    tokens: Vec<Tokens>,
}

impl Objective for ContrastiveCase {
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> iclip_numerics::Result<Var> {
        let o = StackVars::constant(g, &self.original.iter().collect::<Vec<_>>());
        let e = StackVars::constant(g, &self.edited.iter().collect::<Vec<_>>());
        let zv = change_graph(g, &o, &e)?;
        let zt = text_graph(g, &self.tokens)?;
        let lt = g.param(LOG_TAU)?;
        contrastive_graph(g, zv, zt, lt)
    }
}

struct DistillCase {
    spec: BackboneSpec,
    latents: Tensor,
    ks: Vec<usize>,
    teacher: Vec<FeatureStack>,
}

impl Objective for DistillCase {
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> iclip_numerics::Result<Var> {
        let x = g.constant(self.latents.cast());
        let s = self.spec.forward(g, x, Some(&self.ks))?;
        let t = StackVars::constant(g, &self.teacher.iter().collect::<Vec<_>>());
        lddino_graph(g, &s, &t)
    }
}

struct DecoderCase {
    prefix: Tensor,
    tokens: Vec<Tokens>,
}

impl Objective for DecoderCase {
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> iclip_numerics::Result<Var> {
        let p = g.constant(self.prefix.cast());
        let logits = decoder_logits(g, p, &self.tokens)?;
        let (t, w) = decap_targets::<F>(&self.tokens);
        g.cross_entropy(logits, &t, &w)
    }
}

fn worst<O: Objective>(obj: &O, params: &ParamMap, seed: u64) -> Result<f64> {
    Ok(fd_check(obj, params, MODEL_FD_STEP, COORDS, seed)?.max())
}

/// Runs every composite objective for seeds `0..seeds`.
pub fn run_model_suite(seeds: u64) -> Result<Vec<ModelSuiteRow>> {
    let mut err = [0.0f64; 4];
    for seed in 0..seeds {
        let (case, params) = EditorCase::new(seed)?;
        err[0] = err[0].max(worst(&case, &params, seed)?);

        let mut rng = RngStream::new(seed, "gradsuite-models");
        let case = ContrastiveCase {
            original: (0..BATCH).map(|_| random_stack(&mut rng)).collect(),
            edited: (0..BATCH).map(|_| random_stack(&mut rng)).collect(),
            tokens: random_tokens(&mut rng, BATCH),
        };
        err[1] = err[1].max(worst(&case, &init_iclip(TINY, seed), seed)?);

        let spec = BackboneSpec {
            mode: InputMode::Latent,
            arch: TINY,
            t_max: 50,
        };
        let case = DistillCase {
            spec,
            latents: randn(&mut rng, &[BATCH, LATENT_SIDE, LATENT_SIDE, LATENT_C]),
            ks: (0..BATCH).map(|_| rng.below(51)).collect(),
            teacher: (0..BATCH).map(|_| random_stack(&mut rng)).collect(),
        };
        err[2] = err[2].max(worst(&case, &spec.init(seed), seed)?);

        let case = DecoderCase {
            prefix: randn(&mut rng, &[BATCH, TINY.width]),
            tokens: random_tokens(&mut rng, BATCH),
        };
        err[3] = err[3].max(worst(&case, &init_decoder(TINY, TINY.width, seed), seed)?);
    }
    Ok(["editor_total", "contrastive", "latent_distill", "decoder_ce"]
        .into_iter()
        .zip(err)
        .map(|(objective, max_rel_err)| ModelSuiteRow {
            objective,
            seeds: seeds as usize,
            max_rel_err,
        })
        .collect())
}
