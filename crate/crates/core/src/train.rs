//! Minibatch iteration and the shared optimizer step.

use iclip_numerics::{clip_grad_norm, Adam, NumericsError, ParamMap, ParamStore, RngStream};

use crate::error::{CoreError, Result};

/// Epoch-shuffled minibatches over a fixed id list.
pub struct Batcher {
    ids: Vec<usize>,
    pos: usize,
    rng: RngStream,
}

impl Batcher {
    pub fn new(ids: Vec<usize>, rng: RngStream) -> Result<Batcher> {
        if ids.is_empty() {
            return Err(CoreError::Config("no training samples".into()));
        }
        let mut b = Batcher { ids, pos: 0, rng };
        b.rng.shuffle(&mut b.ids);
        Ok(b)
    }

    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.ids.len() {
                self.rng.shuffle(&mut self.ids);
                self.pos = 0;
            }
            out.push(self.ids[self.pos]);
            self.pos += 1;
        }
        out
    }
}

pub const GRAD_CLIP: f32 = 1.0;

/// Adam with global-norm clipping; non-finite losses abort the stage.
pub struct Trainer {
    pub store: ParamStore,
    opt: Adam,
    stage: &'static str,
    seed: u64,
}

impl Trainer {
    pub fn new(params: ParamMap, lr: f32, stage: &'static str, seed: u64) -> Result<Trainer> {
        let opt = Adam::new(lr);
        opt.validate()?;
        Ok(Trainer {
            store: ParamStore::new(params),
            opt,
            stage,
            seed,
        })
    }

    pub fn params(&self) -> &ParamMap {
        self.store.params()
    }

    pub fn step(&mut self, step: usize, loss: f32, mut grads: ParamMap) -> Result<()> {
        if !loss.is_finite() {
            return Err(self.diverged(step, loss as f64));
        }
        clip_grad_norm(&mut grads, GRAD_CLIP);
        self.store.adam_step(&grads, &self.opt)?;
        Ok(())
    }

    pub fn diverged(&self, step: usize, loss: f64) -> CoreError {
        CoreError::Divergence {
            stage: self.stage,
            step,
            seed: self.seed,
            loss,
        }
    }

    /// Maps a non-finite tape value to a divergence error with seed info.
    pub fn check<T>(&self, step: usize, r: std::result::Result<T, NumericsError>) -> Result<T> {
        match r {
            Err(NumericsError::NonFinite { .. }) => Err(self.diverged(step, f64::NAN)),
            other => Ok(other?),
        }
    }

    pub fn into_params(self) -> ParamMap {
        self.store.into_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batcher_covers_every_id_each_epoch() {
        let mut b = Batcher::new((0..10).collect(), RngStream::new(1, "b")).unwrap();
        let mut seen = b.next_batch(10);
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(b.next_batch(25).len(), 25);
    }

    #[test]
    fn nan_loss_is_divergence() {
        let mut t = Trainer::new(ParamMap::new(), 1e-3, "unit", 9).unwrap();
        let e = t.step(4, f32::NAN, ParamMap::new()).unwrap_err();
        assert!(matches!(e, CoreError::Divergence { step: 4, seed: 9, .. }));
    }
}
