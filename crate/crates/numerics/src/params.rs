//! Named parameter collections and the Adam optimizer.

use std::collections::btree_map::{self, BTreeMap};

use crate::error::{NumericsError, Result};
use crate::tensor::{Real, Tensor};

/// Name → tensor, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamMap<F: Real = f32>(BTreeMap<String, Tensor<F>>);

impl<F: Real> ParamMap<F> {
    pub fn new() -> Self {
        ParamMap(BTreeMap::new())
    }

    pub fn insert(&mut self, name: String, t: Tensor<F>) -> Option<Tensor<F>> {
        self.0.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.0.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<F>> {
        self.0.remove(name)
    }

    pub fn iter(&self) -> btree_map::Iter<'_, String, Tensor<F>> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> btree_map::IterMut<'_, String, Tensor<F>> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamMap<G> {
        ParamMap(self.0.iter().map(|(k, v)| (k.clone(), v.cast())).collect())
    }

    /// Entries whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamMap<F> {
        ParamMap(
            self.0
                .range(prefix.to_string()..)
                .take_while(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        )
    }

    pub fn extend(&mut self, other: ParamMap<F>) {
        self.0.extend(other.0);
    }

    /// Euclidean norm over every entry.
    pub fn global_norm(&self) -> F {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| *x * *x)
            .sum::<F>()
            .sqrt()
    }

    pub fn scale_all(&mut self, c: F) {
        for t in self.0.values_mut() {
            for x in t.data_mut() {
                *x = *x * c;
            }
        }
    }

    /// Adds `other` entrywise; both maps must hold the same names and shapes.
    pub fn accumulate(&mut self, other: &ParamMap<F>) -> Result<()> {
        for (name, t) in other.iter() {
            let dst = self
                .0
                .get_mut(name)
                .ok_or_else(|| NumericsError::UnknownParam(name.clone()))?;
            if dst.shape() != t.shape() {
                return Err(NumericsError::shape("accumulate", dst.shape(), t.shape()));
            }
            for (d, s) in dst.data_mut().iter_mut().zip(t.data()) {
                *d = *d + *s;
            }
        }
        Ok(())
    }
}

impl<F: Real> FromIterator<(String, Tensor<F>)> for ParamMap<F> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<F>)>>(iter: I) -> Self {
        ParamMap(iter.into_iter().collect())
    }
}

impl<F: Real> IntoIterator for ParamMap<F> {
    type Item = (String, Tensor<F>);
    type IntoIter = btree_map::IntoIter<String, Tensor<F>>;
    fn into_iter(self) -> Self::IntoIter {
        self.0.into_iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(NumericsError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(NumericsError::Config(format!("invalid Adam hyperparameters {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

/// Trainable parameters plus their Adam moment slots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: ParamMap<f32>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

impl ParamStore {
    pub fn new(params: ParamMap<f32>) -> Self {
        ParamStore {
            params,
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn params(&self) -> &ParamMap<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap<f32> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamMap<f32> {
        self.params
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Moment slots start at zero on first
    /// use. Parameters without a gradient entry are left untouched.
    pub fn adam_step(&mut self, grads: &ParamMap<f32>, opt: &Adam) -> Result<()> {
        opt.validate()?;
        for (name, g) in grads.iter() {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| NumericsError::UnknownParam(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(NumericsError::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (opt.beta1 as f64).powi(t);
        let bc2 = 1.0 - (opt.beta2 as f64).powi(t);
        for (name, g) in grads.iter() {
            let p = self.params.get_mut(name).expect("checked above");
            let slot = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
            });
            for (((x, gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.iter_mut())
                .zip(slot.v.iter_mut())
            {
                *m = opt.beta1 * *m + (1.0 - opt.beta1) * gi;
                *v = opt.beta2 * *v + (1.0 - opt.beta2) * gi * gi;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *x -= (opt.lr as f64 * m_hat / (v_hat.sqrt() + opt.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamMap<f32>, max_norm: f32) -> f32 {
    let n = grads.global_norm();
    if n > max_norm && n > 0.0 {
        grads.scale_all(max_norm / n);
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f32]) -> ParamStore {
        let mut m = ParamMap::new();
        m.insert("w".into(), Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        ParamStore::new(m)
    }

    fn grads(vals: &[f32]) -> ParamMap<f32> {
        let mut m = ParamMap::new();
        m.insert("w".into(), Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        m
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store(&[1.0, -2.0, 3.0]);
        s.adam_step(&grads(&[0.0, 0.0, 0.0]), &Adam::new(0.1)).unwrap();
        assert_eq!(s.params().get("w").unwrap().data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store(&[1.0, 1.0, 1.0]);
        s.adam_step(&grads(&[0.5, -3.0, 1e-3]), &Adam::new(0.01)).unwrap();
        let w = s.params().get("w").unwrap().data().to_vec();
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] - 1.01).abs() < 1e-6);
        // eps makes tiny gradients move slightly less than lr
        assert!((w[2] - 0.99).abs() < 1e-5);
    }

    #[test]
    fn non_positive_lr_is_a_config_error() {
        let mut s = store(&[1.0]);
        assert!(matches!(
            s.adam_step(&grads(&[1.0]), &Adam::new(0.0)),
            Err(NumericsError::Config(_))
        ));
        assert!(s.adam_step(&grads(&[1.0]), &Adam::new(-1e-3)).is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = grads(&[3.0, 4.0]);
        let before = clip_grad_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-6);
    }
}
