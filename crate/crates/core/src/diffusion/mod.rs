//! Noise schedule, forward diffusion and the deterministic reverse step,
//! plus the latent codec.

mod codec;

use iclip_numerics::{Graph, NumericsError, ParamMap, Real, Tensor, Var};

use crate::error::{CoreError, Result};

pub use codec::{train_codec, Codec, CodecConfig, CodecReport, LATENT_C, LATENT_SIDE};

pub const DEFAULT_T: usize = 50;

/// Linear β schedule. Index 0 is the clean state: `alpha_bar[0] == 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// β runs linearly from `1e-4 · 1000/T` to `0.02 · 1000/T`, keeping the
    /// per-step signal-to-noise profile of a 1000-step schedule.
    pub fn linear(t: usize) -> Result<NoiseSchedule> {
        // The largest beta, 20/T, must stay below one.
        if t <= 20 {
            return Err(CoreError::Config(format!("linear schedule needs more than 20 steps, got {t}")));
        }
        let scale = 1000.0 / t as f64;
        let (lo, hi) = (1e-4 * scale, 0.02 * scale);
        let betas = (0..t).map(|i| lo + (hi - lo) * i as f64 / (t - 1) as f64).collect();
        NoiseSchedule::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<NoiseSchedule> {
        if betas.is_empty() || betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(CoreError::Config("betas must lie in (0, 1)".into()));
        }
        if betas.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CoreError::Config("betas must be strictly increasing".into()));
        }
        let mut alpha_bar = vec![1.0];
        for b in &betas {
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        assert!(alpha_bar.windows(2).all(|w| w[1] < w[0]), "alpha_bar must decrease");
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    fn check(&self, k: usize) -> Result<()> {
        if k > self.steps() {
            return Err(CoreError::Invalid(format!("timestep {k} outside [0, {}]", self.steps())));
        }
        Ok(())
    }

    /// `(√ᾱ_k, √(1−ᾱ_k))`.
    pub fn coefficients(&self, k: usize) -> (f64, f64) {
        let a = self.alpha_bar[k];
        (a.sqrt(), (1.0 - a).sqrt())
    }

    /// Stored as `schedule.betas` next to a model's weights.
    pub fn to_params(&self) -> ParamMap {
        let mut p = ParamMap::new();
        p.insert(
            "schedule.betas".into(),
            Tensor::new(vec![self.steps()], self.betas.iter().map(|b| *b as f32).collect()).expect("betas"),
        );
        p
    }

    /// Rebuilds from a checkpoint; betas are recomputed from `T` when they
    /// match the linear schedule so no precision is lost to storage.
    pub fn from_params(p: &ParamMap) -> Result<NoiseSchedule> {
        let t = p
            .get("schedule.betas")
            .ok_or_else(|| CoreError::Invalid("checkpoint has no schedule.betas".into()))?;
        let linear = NoiseSchedule::linear(t.numel())?;
        if linear.betas.iter().zip(t.data()).all(|(a, b)| (*a as f32) == *b) {
            Ok(linear)
        } else {
            NoiseSchedule::from_betas(t.data().iter().map(|b| *b as f64).collect())
        }
    }

    /// `count` strictly decreasing timesteps from `T` down to 1, evenly
    /// strided, for few-step sampling.
    pub fn strided(&self, count: usize) -> Vec<usize> {
        let t = self.steps();
        let count = count.clamp(1, t);
        let mut ks: Vec<usize> = (0..count).map(|i| t - (i * t) / count).collect();
        ks.dedup();
        ks
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<F: Real = f32> {
    pub latent: Tensor<F>,
    pub k: usize,
    pub noise: Option<Tensor<F>>,
}

/// `L̃_k = √ᾱ_k · L + √(1−ᾱ_k) · N`; `k = 0` returns `L` unchanged.
pub fn fd<F: Real>(s: &NoiseSchedule, l: &Tensor<F>, n: &Tensor<F>, k: usize) -> Result<LatentState<F>> {
    s.check(k)?;
    if l.shape() != n.shape() {
        return Err(CoreError::Invalid(format!("noise shape {:?} != latent shape {:?}", n.shape(), l.shape())));
    }
    let latent = if k == 0 {
        l.clone()
    } else {
        let (a, b) = s.coefficients(k);
        let data = l
            .data()
            .iter()
            .zip(n.data())
            .map(|(x, e)| F::of(a * x.to_f64().unwrap() + b * e.to_f64().unwrap()))
            .collect();
        Tensor::new(l.shape().to_vec(), data)?
    };
    Ok(LatentState {
        latent,
        k,
        noise: Some(n.clone()),
    })
}

/// Deterministic (η = 0) step `k → k−1`:
/// `x̂₀ = (L̃_k − √(1−ᾱ_k)·Ñ)/√ᾱ_k`, `L̃_{k−1} = √ᾱ_{k−1}·x̂₀ + √(1−ᾱ_{k−1})·Ñ`.
pub fn rd<F: Real>(s: &NoiseSchedule, state: &LatentState<F>, predicted: &Tensor<F>) -> Result<LatentState<F>> {
    rd_to(s, state, predicted, state.k.wrapping_sub(1))
}

/// Deterministic jump `k → j` for any `j < k` (strided sampling).
pub fn rd_to<F: Real>(s: &NoiseSchedule, state: &LatentState<F>, predicted: &Tensor<F>, j: usize) -> Result<LatentState<F>> {
    let k = state.k;
    if k == 0 {
        return Err(CoreError::Invalid("no reverse step below the clean state".into()));
    }
    s.check(k)?;
    if j >= k {
        return Err(CoreError::Invalid(format!("reverse step must go down: {k} -> {j}")));
    }
    if predicted.shape() != state.latent.shape() {
        return Err(CoreError::Invalid("predicted noise shape mismatch".into()));
    }
    let (ak, bk) = s.coefficients(k);
    let (aj, bj) = s.coefficients(j);
    let data = state
        .latent
        .data()
        .iter()
        .zip(predicted.data())
        .map(|(x, e)| {
            let (x, e) = (x.to_f64().unwrap(), e.to_f64().unwrap());
            let x0 = (x - bk * e) / ak;
            F::of(aj * x0 + bj * e)
        })
        .collect();
    Ok(LatentState {
        latent: Tensor::new(state.latent.shape().to_vec(), data)?,
        k: j,
        noise: None,
    })
}

/// [`rd`] on the tape, differentiable in both the state and the noise
/// prediction. `latent` and `predicted` may be batched; `k` is per row.
pub fn rd_graph<F: Real>(
    g: &mut Graph<'_, F>,
    s: &NoiseSchedule,
    latent: Var,
    predicted: Var,
    ks: &[usize],
) -> iclip_numerics::Result<Var> {
    let shape = g.shape(latent).to_vec();
    if shape.first() != Some(&ks.len()) || g.shape(predicted) != shape.as_slice() {
        return Err(NumericsError::ShapeMismatch {
            op: "rd",
            lhs: shape,
            rhs: g.shape(predicted).to_vec(),
        });
    }
    let per = shape[1..].iter().product::<usize>();
    let mut cx = Vec::with_capacity(ks.len() * per);
    let mut ce = Vec::with_capacity(ks.len() * per);
    for &k in ks {
        if k == 0 || k > s.steps() {
            return Err(NumericsError::Config(format!("rd: timestep {k} has no step below it")));
        }
        let (ak, bk) = s.coefficients(k);
        let (aj, bj) = s.coefficients(k - 1);
        // Expanded: aj/ak · L̃ + (bj − aj·bk/ak) · Ñ.
        cx.extend(std::iter::repeat(F::of(aj / ak)).take(per));
        ce.extend(std::iter::repeat(F::of(bj - aj * bk / ak)).take(per));
    }
    let cx = g.constant(Tensor::new(shape.clone(), cx)?);
    let ce = g.constant(Tensor::new(shape, ce)?);
    let a = g.mul(latent, cx)?;
    let b = g.mul(predicted, ce)?;
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_alpha_bars(a: &[f64]) -> NoiseSchedule {
        NoiseSchedule {
            betas: vec![0.5; a.len() - 1],
            alpha_bar: a.to_vec(),
        }
    }

    #[test]
    fn schedule_shape() {
        let s = NoiseSchedule::linear(50).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        assert!((s.betas()[0] - 0.002).abs() < 1e-12);
        assert!((s.betas()[49] - 0.4).abs() < 1e-12);
        assert!(s.alpha_bar(50) < 1e-4);
        assert!(NoiseSchedule::from_betas(vec![0.2, 0.1]).is_err());
    }

    #[test]
    fn fd_arithmetic() {
        let s = with_alpha_bars(&[1.0, 0.25]);
        let l = Tensor::new(vec![2], vec![1.0f64, -2.0]).unwrap();
        let n = Tensor::new(vec![2], vec![0.5f64, 1.0]).unwrap();
        let out = fd(&s, &l, &n, 1).unwrap().latent;
        let b = 0.75f64.sqrt();
        assert!((out.data()[0] - (0.5 + b * 0.5)).abs() < 1e-12);
        assert!((out.data()[1] - (-1.0 + b)).abs() < 1e-12);
        assert!(fd(&s, &l, &n, 2).is_err());
    }

    #[test]
    fn rd_arithmetic() {
        // ᾱ_k = 0.25, ᾱ_{k−1} = 0.64: oracle noise gives 0.8·L + 0.6·N.
        let s = with_alpha_bars(&[1.0, 0.64, 0.25]);
        let l = Tensor::new(vec![1], vec![2.0f64]).unwrap();
        let n = Tensor::new(vec![1], vec![-1.0f64]).unwrap();
        let st = fd(&s, &l, &n, 2).unwrap();
        let out = rd(&s, &st, &n).unwrap();
        assert_eq!(out.k, 1);
        assert!((out.latent.data()[0] - (0.8 * 2.0 - 0.6)).abs() < 1e-12);
    }

    #[test]
    fn rd_rejects_clean_state() {
        let s = NoiseSchedule::linear(50).unwrap();
        let st = LatentState {
            latent: Tensor::<f32>::zeros(&[2]),
            k: 0,
            noise: None,
        };
        assert!(rd(&s, &st, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn strided_indices() {
        let s = NoiseSchedule::linear(50).unwrap();
        let ks = s.strided(20);
        assert_eq!(ks.len(), 20);
        assert_eq!(ks[0], 50);
        assert!(ks.windows(2).all(|w| w[1] < w[0]));
        assert!(*ks.last().unwrap() >= 1);
        assert_eq!(s.strided(50), (1..=50).rev().collect::<Vec<_>>());
    }

    #[test]
    fn schedule_survives_checkpoint() {
        let s = NoiseSchedule::linear(50).unwrap();
        assert_eq!(NoiseSchedule::from_params(&s.to_params()).unwrap(), s);
    }
}
