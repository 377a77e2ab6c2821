//! Loss evaluation against a parameter map, and the central-difference
//! gradient oracle.
//!
//! An [`Objective`] describes its graph once, generically over the scalar
//! type, so the same description runs in `f32` for training and in `f64` for
//! the oracle.

use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamMap;
use crate::rng::RngStream;
use crate::tensor::Real;

pub trait Objective {
    /// Builds the scalar loss. The trainable parameters are already bound.
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var>;
}

fn eval<O: Objective, F: Real>(obj: &O, params: &ParamMap<F>) -> Result<F> {
    let mut g = Graph::new();
    g.bind(params, true);
    let l = obj.loss(&mut g)?;
    Ok(g.value(l).item())
}

/// Loss value and gradients for every parameter in `params`; unreachable
/// parameters get exact zeros.
pub fn forward_backward<O: Objective, F: Real>(obj: &O, params: &ParamMap<F>) -> Result<(F, ParamMap<F>)> {
    let mut g = Graph::new();
    g.bind(params, true);
    let l = obj.loss(&mut g)?;
    let grads = g.backward(l)?;
    Ok((g.value(l).item(), grads.params))
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    /// Max relative error per parameter name.
    pub per_param: BTreeMap<String, f64>,
    pub coords_checked: usize,
}

impl FdReport {
    pub fn max(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// Floor on the error denominator: gradients that are exactly zero by
/// symmetry (e.g. a key bias under softmax) are judged on an absolute scale.
pub const FD_DENOM_EPS: f64 = 1e-6;

/// Compares analytic gradients from a double-precision backward pass to
/// Richardson-extrapolated central differences (steps `h` and `h/2`). At most `max_coords` coordinates per parameter are
/// probed, chosen with `seed`; small parameters are probed exhaustively.
pub fn fd_check<O: Objective>(
    obj: &O,
    params: &ParamMap<f32>,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FdReport> {
    let p64: ParamMap<f64> = params.cast();
    let (_, analytic) = forward_backward(obj, &p64)?;
    fd_compare(obj, &p64, &analytic, h, max_coords, seed)
}

/// The comparison half of [`fd_check`], taking the analytic gradients from
/// the caller.
pub fn fd_compare<O: Objective>(
    obj: &O,
    params: &ParamMap<f64>,
    analytic: &ParamMap<f64>,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(NumericsError::Config(format!("finite-difference step must be positive, got {h}")));
    }
    if params.scalar_count() > 100_000 {
        return Err(NumericsError::Config(format!(
            "{} scalars is too many for a finite-difference check",
            params.scalar_count()
        )));
    }
    let mut rng = RngStream::new(seed, "fd-check");
    let mut report = FdReport::default();
    let mut work = params.clone();
    for (name, t) in params.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.clone()))?;
        let n = t.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(max_coords);
            all
        };
        let mut worst = 0.0f64;
        for c in coords {
            let orig = t.data()[c];
            let mut central = |step: f64| -> Result<f64> {
                work.get_mut(name).unwrap().data_mut()[c] = orig + step;
                let plus = eval(obj, &work)?;
                work.get_mut(name).unwrap().data_mut()[c] = orig - step;
                let minus = eval(obj, &work)?;
                work.get_mut(name).unwrap().data_mut()[c] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            // Richardson: cancels the h² term of the central difference, so
            // tiny gradient coordinates are not swamped by curvature.
            let coarse = central(h)?;
            let fine = central(h / 2.0)?;
            let numeric = (4.0 * fine - coarse) / 3.0;
            let err = (grad.data()[c] - numeric).abs() / (numeric.abs() + FD_DENOM_EPS);
            worst = worst.max(err);
            report.coords_checked += 1;
        }
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}
