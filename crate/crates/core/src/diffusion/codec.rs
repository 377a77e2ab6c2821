//! Per-patch autoencoder mapping 32×32×3 images to 8×8×4 latents.
//!
//! Each 4×4 pixel patch is encoded independently by a small MLP. Latent
//! channels are standardized with statistics measured on the training images
//! after fitting, so downstream diffusion sees roughly unit-variance latents.

use iclip_numerics::{Graph, ParamMap, Real, RngStream, Tensor, Var};

use crate::corpus::{Corpus, Split, CHANNELS, IMG};
use crate::error::{CoreError, Result};
use crate::nn::{init_linear, linear, patchify_index, stack, unpatchify_index, unstack};
use crate::train::{Batcher, Trainer};

pub const LATENT_SIDE: usize = 8;
pub const LATENT_C: usize = 4;
const PATCH: usize = IMG / LATENT_SIDE;
const PATCH_DIM: usize = PATCH * PATCH * CHANNELS;
const STD_FLOOR: f32 = 1e-2;
const CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub hidden: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            seed: 0,
            steps: 1500,
            batch: 16,
            lr: 3e-3,
            hidden: 96,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodecReport {
    pub steps: usize,
    pub final_train_loss: f64,
    pub holdout_mse: f64,
    pub holdout_images: usize,
}

/// A frozen codec. Encoding is a pure function of the weights.
#[derive(Clone, Debug)]
pub struct Codec {
    params: ParamMap,
}

fn encode_raw<F: Real>(g: &mut Graph<'_, F>, x: Var) -> iclip_numerics::Result<Var> {
    let b = g.shape(x)[0];
    let n = LATENT_SIDE * LATENT_SIDE;
    let p = g.gather(x, patchify_index(b, IMG, CHANNELS, PATCH), &[b, n, PATCH_DIM])?;
    let h = linear(g, p, "codec.enc1")?;
    let h = g.gelu(h)?;
    linear(g, h, "codec.enc2")
}

fn decode_raw<F: Real>(g: &mut Graph<'_, F>, z: Var) -> iclip_numerics::Result<Var> {
    let b = g.shape(z)[0];
    let h = linear(g, z, "codec.dec1")?;
    let h = g.gelu(h)?;
    let p = linear(g, h, "codec.dec2")?;
    g.gather(p, unpatchify_index(b, IMG, CHANNELS, PATCH), &[b, IMG, IMG, CHANNELS])
}

impl Codec {
    pub fn init(seed: u64, hidden: usize) -> ParamMap {
        let mut rng = RngStream::new(seed, "codec-init");
        let mut p = ParamMap::new();
        init_linear(&mut p, &mut rng, "codec.enc1", PATCH_DIM, hidden, 1.0);
        init_linear(&mut p, &mut rng, "codec.enc2", hidden, LATENT_C, 1.0);
        init_linear(&mut p, &mut rng, "codec.dec1", LATENT_C, hidden, 1.0);
        init_linear(&mut p, &mut rng, "codec.dec2", hidden, PATCH_DIM, 1.0);
        p
    }

    pub fn from_params(params: ParamMap) -> Result<Codec> {
        for name in ["codec.enc1.w", "codec.enc2.w", "codec.dec1.w", "codec.dec2.w", "codec.lat_mean", "codec.lat_std"] {
            if !params.contains(name) {
                return Err(CoreError::Invalid(format!("codec checkpoint lacks `{name}`")));
            }
        }
        Ok(Codec { params })
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    fn stats(&self) -> (&[f32], &[f32]) {
        (
            self.params.get("codec.lat_mean").expect("checked").data(),
            self.params.get("codec.lat_std").expect("checked").data(),
        )
    }

    /// Standardized latents `[8, 8, 4]`, one per image.
    pub fn encode(&self, images: &[&Tensor]) -> Result<Vec<Tensor>> {
        let (mean, std) = self.stats();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            let mut g: Graph<f32> = Graph::new();
            g.bind(&self.params, false);
            let x = g.try_constant(stack(chunk))?;
            let z = encode_raw(&mut g, x)?;
            for t in unstack(g.value(z)) {
                let data = t.data().iter().enumerate().map(|(i, v)| (v - mean[i % LATENT_C]) / std[i % LATENT_C]).collect();
                out.push(Tensor::new(vec![LATENT_SIDE, LATENT_SIDE, LATENT_C], data)?);
            }
        }
        Ok(out)
    }

    /// Images clamped to `[0, 1]`.
    pub fn decode(&self, latents: &[&Tensor]) -> Result<Vec<Tensor>> {
        let (mean, std) = self.stats();
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(CHUNK) {
            let raw: Vec<Tensor> = chunk
                .iter()
                .map(|l| {
                    let data = l.data().iter().enumerate().map(|(i, v)| v * std[i % LATENT_C] + mean[i % LATENT_C]).collect();
                    Tensor::new(vec![LATENT_SIDE * LATENT_SIDE, LATENT_C], data)
                })
                .collect::<iclip_numerics::Result<_>>()?;
            let mut g: Graph<f32> = Graph::new();
            g.bind(&self.params, false);
            let z = g.try_constant(stack(&raw.iter().collect::<Vec<_>>()))?;
            let x = decode_raw(&mut g, z)?;
            out.extend(unstack(g.value(x)).into_iter().map(|t| t.map(|v| v.clamp(0.0, 1.0))));
        }
        Ok(out)
    }

    /// Mean squared pixel error of decode(encode(x)).
    pub fn reconstruction_mse(&self, images: &[&Tensor]) -> Result<f64> {
        let lat = self.encode(images)?;
        let rec = self.decode(&lat.iter().collect::<Vec<_>>())?;
        let mut se = 0.0f64;
        let mut n = 0usize;
        for (a, b) in images.iter().zip(&rec) {
            se += a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>();
            n += a.numel();
        }
        Ok(se / n.max(1) as f64)
    }
}

/// Fits the autoencoder on the training split (originals and edits), then
/// freezes it and measures reconstruction on the holdout.
pub fn train_codec(corpus: &Corpus, split: Split, cfg: &CodecConfig) -> Result<(Codec, CodecReport)> {
    let train: Vec<&Tensor> = split
        .train_ids()
        .iter()
        .flat_map(|&i| [&corpus.samples[i].original, &corpus.samples[i].edited])
        .collect();
    let mut trainer = Trainer::new(Codec::init(cfg.seed, cfg.hidden), cfg.lr, "train-codec", cfg.seed)?;
    let mut batcher = Batcher::new((0..train.len()).collect(), RngStream::new(cfg.seed, "codec-batches"))?;
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let ids = batcher.next_batch(cfg.batch);
        let x = stack(&ids.iter().map(|&i| train[i]).collect::<Vec<_>>());
        let (loss, grads) = {
            let mut g: Graph<f32> = Graph::new();
            g.bind(trainer.params(), true);
            let xv = g.constant(x);
            let z = trainer.check(step, encode_raw(&mut g, xv))?;
            let y = trainer.check(step, decode_raw(&mut g, z))?;
            let l = trainer.check(step, g.mse(y, xv))?;
            let grads = trainer.check(step, g.backward(l))?;
            (g.value(l).item(), grads.params)
        };
        trainer.step(step, loss, grads)?;
        last = loss as f64;
    }
    let mut params = trainer.into_params();
    // Channel statistics of the raw latents over the training images.
    let mut sum = [0.0f64; LATENT_C];
    let mut sq = [0.0f64; LATENT_C];
    let mut n = 0usize;
    for chunk in train.chunks(CHUNK) {
        let mut g: Graph<f32> = Graph::new();
        g.bind(&params, false);
        let x = g.try_constant(stack(chunk))?;
        let z = encode_raw(&mut g, x)?;
        for (i, v) in g.value(z).data().iter().enumerate() {
            sum[i % LATENT_C] += *v as f64;
            sq[i % LATENT_C] += (*v as f64).powi(2);
        }
        n += chunk.len() * LATENT_SIDE * LATENT_SIDE;
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
    let std: Vec<f32> = (0..LATENT_C)
        .map(|c| {
            let m = sum[c] / n as f64;
            ((sq[c] / n as f64 - m * m).max(0.0).sqrt() as f32).max(STD_FLOOR)
        })
        .collect();
    params.insert("codec.lat_mean".into(), Tensor::new(vec![LATENT_C], mean)?);
    params.insert("codec.lat_std".into(), Tensor::new(vec![LATENT_C], std)?);
    let codec = Codec::from_params(params)?;
    let holdout: Vec<&Tensor> = split
        .holdout_ids()
        .iter()
        .flat_map(|&i| [&corpus.samples[i].original, &corpus.samples[i].edited])
        .collect();
    let holdout_mse = codec.reconstruction_mse(&holdout)?;
    Ok((
        codec,
        CodecReport {
            steps: cfg.steps,
            final_train_loss: last,
            holdout_mse,
            holdout_images: holdout.len(),
        },
    ))
}
