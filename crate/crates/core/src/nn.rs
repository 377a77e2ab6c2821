//! Layers shared by every network: initialisation helpers and
//! tape-building forward functions. Parameters live in a flat
//! [`ParamMap`] under dotted names.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use iclip_numerics::{Graph, ParamMap, Real, Result, RngStream, Tensor, Var, GATHER_ZERO};

/// Width/depth of a transformer-style stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arch {
    pub width: usize,
    pub layers: usize,
}

impl Arch {
    pub const DEFAULT: Arch = Arch { width: 64, layers: 4 };

    pub fn hidden(&self) -> usize {
        2 * self.width
    }
}

pub const LN_EPS: f64 = 1e-5;
/// Additive logit for masked attention entries.
pub const MASKED: f32 = -1e9;

pub fn init_linear(p: &mut ParamMap, rng: &mut RngStream, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    let std = gain / (fan_in as f64).sqrt();
    p.insert(
        format!("{name}.w"),
        Tensor::from_fn(&[fan_in, fan_out], |_| (rng.normal() * std) as f32),
    );
    p.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub fn init_ln(p: &mut ParamMap, name: &str, width: usize) {
    p.insert(format!("{name}.g"), Tensor::full(&[width], 1.0));
    p.insert(format!("{name}.b"), Tensor::zeros(&[width]));
}

pub fn init_embedding(p: &mut ParamMap, rng: &mut RngStream, name: &str, rows: usize, width: usize, std: f64) {
    p.insert(name.to_string(), Tensor::from_fn(&[rows, width], |_| (rng.normal() * std) as f32));
}

/// Pre-LN residual block: attention then MLP.
pub fn init_block(p: &mut ParamMap, rng: &mut RngStream, name: &str, arch: Arch) {
    let d = arch.width;
    let out_gain = 1.0 / (2.0 * arch.layers as f64).sqrt();
    init_ln(p, &format!("{name}.ln1"), d);
    init_linear(p, rng, &format!("{name}.qkv"), d, 3 * d, 1.0);
    init_linear(p, rng, &format!("{name}.proj"), d, d, out_gain);
    init_ln(p, &format!("{name}.ln2"), d);
    init_linear(p, rng, &format!("{name}.fc1"), d, arch.hidden(), 1.0);
    init_linear(p, rng, &format!("{name}.fc2"), arch.hidden(), d, out_gain);
}

pub fn linear<F: Real>(g: &mut Graph<'_, F>, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    g.affine(x, w, b)
}

pub fn layer_norm<F: Real>(g: &mut Graph<'_, F>, x: Var, name: &str) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let gain = g.param(&format!("{name}.g"))?;
    let bias = g.param(&format!("{name}.b"))?;
    let y = g.mul(n, gain)?;
    g.add(y, bias)
}

/// `x[B, L, D]`; `mask` is an additive logit bias broadcastable to
/// `[B, L, L]` (query rows, key columns).
pub fn block<F: Real>(g: &mut Graph<'_, F>, x: Var, name: &str, mask: Option<Var>) -> Result<Var> {
    let d = *g.shape(x).last().expect("rank-3 block input");
    let h = layer_norm(g, x, &format!("{name}.ln1"))?;
    let qkv = linear(g, h, &format!("{name}.qkv"))?;
    let q = g.narrow(qkv, 2, 0, d)?;
    let k = g.narrow(qkv, 2, d, d)?;
    let v = g.narrow(qkv, 2, 2 * d, d)?;
    let s = g.bmm(q, k, true)?;
    let mut s = g.scale(s, F::of(1.0 / (d as f64).sqrt()))?;
    if let Some(m) = mask {
        s = g.add(s, m)?;
    }
    let a = g.softmax(s)?;
    let o = g.bmm(a, v, false)?;
    let o = linear(g, o, &format!("{name}.proj"))?;
    let x = g.add(x, o)?;
    let h = layer_norm(g, x, &format!("{name}.ln2"))?;
    let h = linear(g, h, &format!("{name}.fc1"))?;
    let h = g.gelu(h)?;
    let h = linear(g, h, &format!("{name}.fc2"))?;
    g.add(x, h)
}

/// Lower-triangular additive mask `[L, L]`.
pub fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(&[len, len], |i| if i % len > i / len { MASKED } else { 0.0 })
}

/// Sinusoidal embedding of a diffusion timestep; timesteps are rescaled to
/// a 1000-step range so the frequency spread matches common practice.
pub fn timestep_embedding(k: usize, t_max: usize, dim: usize) -> Vec<f32> {
    let pos = k as f64 * 1000.0 / t_max.max(1) as f64;
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[2 * i] = (pos * freq).sin() as f32;
        out[2 * i + 1] = (pos * freq).cos() as f32;
    }
    out
}

/// `[B, dim]` timestep embeddings.
pub fn timestep_batch(ks: &[usize], t_max: usize, dim: usize) -> Tensor {
    let data = ks.iter().flat_map(|&k| timestep_embedding(k, t_max, dim)).collect();
    Tensor::new(vec![ks.len(), dim], data).expect("timestep batch shape")
}

type IndexKey = (&'static str, usize, usize, usize, usize);

fn cached(key: IndexKey, build: impl FnOnce() -> Vec<usize>) -> Arc<[usize]> {
    static CACHE: OnceLock<Mutex<HashMap<IndexKey, Arc<[usize]>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().expect("index cache");
    map.entry(key).or_insert_with(|| Arc::from(build())).clone()
}

/// Gather indices turning `[B, side, side, c]` into non-overlapping
/// `p × p` patches `[B, (side/p)², p·p·c]` in row-major patch order.
pub fn patchify_index(batch: usize, side: usize, c: usize, p: usize) -> Arc<[usize]> {
    cached(("patchify", batch, side, c, p), || {
        let n = side / p;
        let mut idx = Vec::with_capacity(batch * side * side * c);
        for b in 0..batch {
            for py in 0..n {
                for px in 0..n {
                    for dy in 0..p {
                        for dx in 0..p {
                            for ch in 0..c {
                                idx.push(((b * side + py * p + dy) * side + px * p + dx) * c + ch);
                            }
                        }
                    }
                }
            }
        }
        idx
    })
}

/// Inverse of [`patchify_index`]: patches back to `[B, side, side, c]`.
pub fn unpatchify_index(batch: usize, side: usize, c: usize, p: usize) -> Arc<[usize]> {
    let fwd = patchify_index(batch, side, c, p);
    cached(("unpatchify", batch, side, c, p), || {
        let mut inv = vec![0usize; fwd.len()];
        for (i, &src) in fwd.iter().enumerate() {
            inv[src] = i;
        }
        inv
    })
}

/// im2col for a 3×3, stride-1, zero-padded convolution over
/// `[B, side, side, c]`, giving `[B, side², 9c]`.
pub fn im2col3_index(batch: usize, side: usize, c: usize) -> Arc<[usize]> {
    cached(("im2col3", batch, side, c, 3), || {
        let mut idx = Vec::with_capacity(batch * side * side * 9 * c);
        for b in 0..batch {
            for y in 0..side {
                for x in 0..side {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            let inside = (0..side as isize).contains(&sy) && (0..side as isize).contains(&sx);
                            for ch in 0..c {
                                idx.push(if inside {
                                    ((b * side + sy as usize) * side + sx as usize) * c + ch
                                } else {
                                    GATHER_ZERO
                                });
                            }
                        }
                    }
                }
            }
        }
        idx
    })
}

/// 3×3 same-padding convolution: `x[B, side, side, c] -> [B, side², out]`.
pub fn conv3<F: Real>(g: &mut Graph<'_, F>, x: Var, name: &str) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, side, c) = (s[0], s[1], s[3]);
    let cols = g.gather(x, im2col3_index(b, side, c), &[b, side * side, 9 * c])?;
    linear(g, cols, name)
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(ts: &[&Tensor]) -> Tensor {
    let mut shape = vec![ts.len()];
    shape.extend_from_slice(ts.first().map_or(&[][..], |t| t.shape()));
    let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("stack of equal shapes")
}

/// Splits the leading axis back into tensors.
pub fn unstack(t: &Tensor) -> Vec<Tensor> {
    let n = t.shape()[0];
    let inner: Vec<usize> = t.shape()[1..].to_vec();
    let per = inner.iter().product::<usize>();
    (0..n)
        .map(|i| Tensor::new(inner.clone(), t.data()[i * per..(i + 1) * per].to_vec()).expect("unstack"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unpatchify_inverts_patchify() {
        let t = Tensor::from_fn(&[2, 8, 8, 3], |i| i as f32);
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(t.clone());
        let p = g.gather(x, patchify_index(2, 8, 3, 4), &[2, 4, 48]).unwrap();
        let back = g.gather(p, unpatchify_index(2, 8, 3, 4), &[2, 8, 8, 3]).unwrap();
        assert_eq!(g.value(back), &t);
        // First patch holds the top-left 4x4 block.
        assert_eq!(g.value(p).data()[3], t.data()[3]);
        assert_eq!(g.value(p).data()[12], t.data()[8 * 3]);
    }

    #[test]
    fn causal_mask_hides_the_future() {
        let m = causal_mask(3);
        assert_eq!(m.data(), &[0.0, MASKED, MASKED, 0.0, 0.0, MASKED, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let idx = im2col3_index(1, 4, 2);
        // Output position (1, 1), kernel tap (1, 1), channel 1 reads input (1, 1, 1).
        let pos = (4 + 1) * 18 + 4 * 2 + 1;
        assert_eq!(idx[pos], (4 + 1) * 2 + 1);
        // Tap (0, 0) of position (0, 0) is padding.
        assert_eq!(idx[0], GATHER_ZERO);
    }

    #[test]
    fn timestep_embedding_is_bounded_and_distinct() {
        let a = timestep_embedding(0, 50, 64);
        let b = timestep_embedding(1, 50, 64);
        assert!(a.iter().chain(&b).all(|v| v.abs() <= 1.0));
        assert_ne!(a, b);
    }
}
