//! Define-by-run reverse-mode differentiation.
//!
//! Every op evaluates eagerly, appends one node to the tape and returns a
//! [`Var`] handle. [`Graph::backward`] walks the tape in reverse. Nodes whose
//! inputs carry no gradient are never visited on the way back, so frozen
//! modules can be evaluated on the same tape at forward cost only.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{NumericsError, Result};
use crate::params::ParamMap;
use crate::tensor::{Real, Tensor};

/// Sentinel used by [`Graph::gather`] for "write zero here".
pub const GATHER_ZERO: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum BMap {
    Same,
    Modulo(usize),
    Full(Vec<usize>),
}

impl BMap {
    fn new(src: &[usize], out: &[usize]) -> BMap {
        if src == out {
            return BMap::Same;
        }
        let first = src.iter().position(|&d| d != 1).unwrap_or(src.len());
        let core = &src[first..];
        if out.ends_with(core) {
            return BMap::Modulo(core.iter().product::<usize>().max(1));
        }
        let offset = out.len() - src.len();
        let mut strides = vec![0usize; out.len()];
        let mut acc = 1;
        for i in (0..src.len()).rev() {
            strides[offset + i] = if src[i] == 1 { 0 } else { acc };
            acc *= src[i];
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; out.len()];
        let mut pos = 0usize;
        for _ in 0..total {
            map.push(pos);
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                pos += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                pos -= strides[d] * out[d];
                idx[d] = 0;
            }
        }
        BMap::Full(map)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            BMap::Same => i,
            BMap::Modulo(n) => i % n,
            BMap::Full(m) => m[i],
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
}

enum Op<F> {
    Leaf,
    Param(String),
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize, trans_b: bool },
    Transpose { a: usize },
    Binary { kind: Binary, a: usize, b: usize, ma: BMap, mb: BMap },
    Scale { a: usize, c: F },
    AddScalar { a: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Exp { a: usize },
    Log { a: usize },
    LayerNorm { a: usize, inv_std: Vec<F> },
    Softmax { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    SumAxis { a: usize, outer: usize, len: usize, inner: usize },
    Concat { parts: Vec<(usize, usize)>, outer: usize, inner: usize },
    Narrow { a: usize, outer: usize, len: usize, start: usize, take: usize, inner: usize },
    Gather { a: usize, idx: Arc<[usize]> },
    Reshape { a: usize },
    Cosine { a: usize, b: usize, width: usize },
    L2Normalize { a: usize, width: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<F>, probs: Vec<F> },
    Mse { a: usize, b: usize },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Grads<F: Real> {
    pub params: ParamMap<F>,
    inputs: HashMap<usize, Tensor<F>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of a leaf created with [`Graph::input_with_grad`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.inputs.get(&v.0)
    }
}

pub struct Graph<'p, F: Real = f32> {
    nodes: Vec<Node<F>>,
    sources: Vec<(Cow<'p, ParamMap<F>>, bool)>,
    bound: HashMap<String, Var>,
    grad_inputs: Vec<usize>,
}

impl<F: Real> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

// Ops take `Var`s and return the resulting `Var`; shape errors name the op.
impl<'p, F: Real> Graph<'p, F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            sources: Vec::new(),
            bound: HashMap::new(),
            grad_inputs: Vec::new(),
        }
    }

    /// Makes every tensor of `params` addressable through [`Graph::param`].
    /// Lookups search sources in binding order.
    pub fn bind(&mut self, params: &'p ParamMap<F>, trainable: bool) -> &mut Self {
        self.sources.push((Cow::Borrowed(params), trainable));
        self
    }

    /// Like [`Graph::bind`] but the graph keeps the map.
    pub fn bind_owned(&mut self, params: ParamMap<F>, trainable: bool) -> &mut Self {
        self.sources.push((Cow::Owned(params), trainable));
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, name: &'static str) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name, node: id });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => self.parents(&op).iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(id))
    }

    fn parents(&self, op: &Op<F>) -> Vec<usize> {
        match op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul { a, b } | Op::Bmm { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Cosine { a, b, .. } | Op::Mse { a, b } => vec![*a, *b],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Relu { a }
            | Op::Gelu { a }
            | Op::Exp { a }
            | Op::Log { a }
            | Op::LayerNorm { a, .. }
            | Op::Softmax { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::SumAxis { a, .. }
            | Op::Narrow { a, .. }
            | Op::Gather { a, .. }
            | Op::Reshape { a }
            | Op::L2Normalize { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        // Constants are checked by `push`; a non-finite input is a caller bug.
        self.push(t, Op::Leaf, "constant").expect("finite constant")
    }

    pub fn try_constant(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Leaf, "constant")
    }

    /// A leaf whose gradient is reported through [`Grads::wrt`].
    pub fn input_with_grad(&mut self, t: Tensor<F>) -> Result<Var> {
        let v = self.push(t, Op::Leaf, "input")?;
        self.nodes[v.0].requires_grad = true;
        self.grad_inputs.push(v.0);
        Ok(v)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let (tensor, trainable) = self
            .sources
            .iter()
            .find_map(|(src, tr)| src.get(name).map(|t| (t.clone(), *tr)))
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        let v = if trainable {
            self.push(tensor, Op::Param(name.to_string()), "param")?
        } else {
            self.push(tensor, Op::Leaf, "param")?
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    // ---- linear algebra ------------------------------------------------

    /// `a[.., k] · b[k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(NumericsError::shape("matmul", &sa, &sb));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k.max(1);
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, self.value(a).data(), k, 1, self.value(b).data(), n, 1, F::zero(), &mut out);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(shape, out)?, Op::MatMul { a: a.0, b: b.0 }, "matmul")
    }

    /// Batched `a[B, m, k] · b[B, k, n]`, or `b[B, n, k]` transposed when
    /// `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let ok = sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0];
        let (bk, bn) = if trans_b && ok { (sb[2], sb[1]) } else if ok { (sb[1], sb[2]) } else { (0, 0) };
        if !ok || sa[2] != bk {
            return Err(NumericsError::shape("bmm", &sa, &sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], bn);
        let mut out = vec![F::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            F::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                k,
                1,
                &bv[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                F::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::Bmm { a: a.0, b: b.0, trans_b },
            "bmm",
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(NumericsError::shape("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let outer = self.value(a).numel() / (r * c).max(1);
        let src = self.value(a).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            let base = o * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let mut shape = s;
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        self.push(Tensor::new(shape, out)?, Op::Transpose { a: a.0 }, "transpose")
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| NumericsError::shape(name, &sa, &sb))?;
        let ma = BMap::new(&sa, &out_shape);
        let mb = BMap::new(&sb, &out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let total: usize = out_shape.iter().product();
        let data: Vec<F> = match (&ma, &mb, kind) {
            (BMap::Same, BMap::Same, Binary::Add) => av.iter().zip(bv).map(|(x, y)| *x + *y).collect(),
            (BMap::Same, BMap::Same, Binary::Mul) => av.iter().zip(bv).map(|(x, y)| *x * *y).collect(),
            _ => (0..total)
                .map(|i| {
                    let (x, y) = (av[ma.at(i)], bv[mb.at(i)]);
                    match kind {
                        Binary::Add => x + y,
                        Binary::Sub => x - y,
                        Binary::Mul => x * y,
                    }
                })
                .collect(),
        };
        self.push(
            Tensor::new(out_shape, data)?,
            Op::Binary { kind, a: a.0, b: b.0, ma, mb },
            name,
        )
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b, "mul")
    }

    /// `x · w + b` with `w[k, n]`, `b[n]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale { a: a.0, c }, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar { a: a.0 }, "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(F::zero()));
        self.push(t, Op::Relu { a: a.0 }, "relu")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| gelu_fwd(x));
        self.push(t, Op::Gelu { a: a.0 }, "gelu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(F::exp);
        self.push(t, Op::Exp { a: a.0 }, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(F::ln);
        self.push(t, Op::Log { a: a.0 }, "log")
    }

    // ---- normalisation -------------------------------------------------

    /// Normalises over the last axis (no affine part; compose with
    /// `mul`/`add` for gain and bias).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let w = *s.last().ok_or_else(|| NumericsError::shape("layer_norm", &s, &[]))?;
        let src = self.value(a).data();
        let rows = src.len() / w.max(1);
        let wf = F::of(w as f64);
        let eps = F::of(eps);
        let mut out = vec![F::zero(); src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &src[r * w..(r + 1) * w];
            let mean = x.iter().copied().sum::<F>() / wf;
            let var = x.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() / wf;
            let is = F::one() / (var + eps).sqrt();
            for (o, v) in out[r * w..(r + 1) * w].iter_mut().zip(x) {
                *o = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(Tensor::new(s, out)?, Op::LayerNorm { a: a.0, inv_std }, "layer_norm")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let w = *s.last().ok_or_else(|| NumericsError::shape("softmax", &s, &[]))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(w.max(1)) {
            softmax_in_place(row);
        }
        self.push(Tensor::new(s, out)?, Op::Softmax { a: a.0 }, "softmax")
    }

    /// Rows of the last axis scaled to unit norm; the zero row maps to zero.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let w = *s.last().ok_or_else(|| NumericsError::shape("l2_normalize", &s, &[]))?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(w.max(1)) {
            let n = norm(row);
            let d = n + F::of(crate::COSINE_EPS);
            for x in row.iter_mut() {
                *x = *x / d;
            }
        }
        self.push(Tensor::new(s, out)?, Op::L2Normalize { a: a.0, width: w }, "l2_normalize")
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(v), Op::Sum { a: a.0 }, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let v = t.data().iter().copied().sum::<F>() / F::of(t.numel().max(1) as f64);
        self.push(Tensor::scalar(v), Op::Mean { a: a.0 }, "mean")
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(NumericsError::shape("sum_axis", &s, &[axis]));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (dst, x) in out[o * inner..(o + 1) * inner].iter_mut().zip(&src[base..base + inner]) {
                    *dst = *dst + *x;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::SumAxis { a: a.0, outer, len, inner },
            "sum_axis",
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| NumericsError::shape("mean_axis", self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, F::one() / F::of(len.max(1) as f64))
    }

    // ---- shape plumbing -------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push(t, Op::Reshape { a: a.0 }, "reshape")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| NumericsError::Config("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(NumericsError::shape("concat", &first, &[axis]));
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(NumericsError::shape("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, len) in parts.iter().zip(&lens) {
                let src = self.value(*p).data();
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let parts = parts.iter().zip(lens).map(|(p, l)| (p.0, l)).collect();
        self.push(Tensor::new(shape, out)?, Op::Concat { parts, outer, inner }, "concat")
    }

    /// `take` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, take: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + take > s[axis] {
            return Err(NumericsError::shape("narrow", &s, &[axis, start, take]));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&src[base..base + take * inner]);
        }
        let mut shape = s;
        shape[axis] = take;
        self.push(
            Tensor::new(shape, out)?,
            Op::Narrow { a: a.0, outer, len, start, take, inner },
            "narrow",
        )
    }

    /// `out[i] = a[idx[i]]`, or zero where `idx[i] == GATHER_ZERO`. Covers
    /// patch extraction and im2col.
    pub fn gather(&mut self, a: Var, idx: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(NumericsError::shape("gather", shape, &[idx.len()]));
        }
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            if i == GATHER_ZERO {
                out.push(F::zero());
            } else if i < src.len() {
                out.push(src[i]);
            } else {
                return Err(NumericsError::shape("gather", self.shape(a), &[i]));
            }
        }
        self.push(Tensor::new(shape.to_vec(), out)?, Op::Gather { a: a.0, idx }, "gather")
    }

    // ---- losses and similarities --------------------------------------

    /// Row-wise cosine similarity over the last axis:
    /// `a·b / (|a||b| + 1e-8)`, so a zero row scores 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb || sa.is_empty() {
            return Err(NumericsError::shape("cosine", &sa, &sb));
        }
        let w = *sa.last().unwrap();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<F> = av.chunks(w.max(1)).zip(bv.chunks(w.max(1))).map(|(x, y)| cosine(x, y)).collect();
        let mut shape = sa[..sa.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::new(shape, out)?, Op::Cosine { a: a.0, b: b.0, width: w }, "cosine")
    }

    /// Weighted mean token cross-entropy. `logits[N, C]`; rows with zero
    /// weight are excluded from both numerator and denominator.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || weights.len() != s[0] {
            return Err(NumericsError::shape("cross_entropy", &s, &[targets.len(), weights.len()]));
        }
        let c = s[1];
        if let Some(t) = targets.iter().zip(weights).find(|(t, w)| **t >= c && **w != F::zero()) {
            return Err(NumericsError::shape("cross_entropy", &s, &[*t.0]));
        }
        let total_w: F = weights.iter().copied().sum();
        if total_w <= F::zero() {
            return Err(NumericsError::Config("cross_entropy with zero total weight".into()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = F::zero();
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lse = log_sum_exp(row);
            if weights[r] != F::zero() {
                loss = loss + weights[r] * (lse - row[targets[r]]);
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        self.push(
            Tensor::scalar(loss / total_w),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.iter().map(|w| *w / total_w).collect(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa != sb {
            return Err(NumericsError::shape("mse", &sa, &sb));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = F::of(av.len().max(1) as f64);
        let v = av.iter().zip(bv).map(|(x, y)| (*x - *y) * (*x - *y)).sum::<F>() / n;
        self.push(Tensor::scalar(v), Op::Mse { a: a.0, b: b.0 }, "mse")
    }

    // ---- backward --------------------------------------------------------

    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::shape("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut params = ParamMap::new();
        let mut inputs = HashMap::new();

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Param(name) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    if !t.is_finite() {
                        return Err(NumericsError::NonFinite { op: "backward", node: id });
                    }
                    params.insert(name.clone(), t);
                }
                Op::Leaf => {
                    inputs.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }

        for (src, trainable) in &self.sources {
            if !*trainable {
                continue;
            }
            for (name, t) in src.iter() {
                if !params.contains(name) {
                    params.insert(name.clone(), Tensor::zeros(t.shape()));
                }
            }
        }
        if inputs.values().any(|t| !t.is_finite()) {
            return Err(NumericsError::NonFinite { op: "backward", node: loss.0 });
        }
        Ok(Grads { params, inputs })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<F>>], id: usize) -> Option<&'a mut Vec<F>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let n = self.nodes[id].value.numel();
        Some(grads[id].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn propagate(&self, op: &Op<F>, out: &Tensor<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |id: usize| self.nodes[id].value.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b } => {
                let sb = self.nodes[*b].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n.max(1);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    // dA = dC · Bᵀ
                    F::gemm(m, n, k, g, n, 1, val(*b), 1, n, F::one(), ga);
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    // dB = Aᵀ · dC
                    F::gemm(k, m, n, val(*a), 1, k, g, n, 1, F::one(), gb);
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.nodes[*a].value.shape();
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = out.shape()[2];
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let dst = &mut ga[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // B stored [n, k]: dA = dC · B
                            F::gemm(m, n, k, gi, n, 1, bi, k, 1, F::one(), dst);
                        } else {
                            F::gemm(m, n, k, gi, n, 1, bi, 1, n, F::one(), dst);
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB[n, k] = dCᵀ · A
                            F::gemm(n, m, k, gi, 1, n, ai, k, 1, F::one(), dst);
                        } else {
                            F::gemm(k, m, n, ai, 1, k, gi, n, 1, F::one(), dst);
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let outer = g.len() / (r * c).max(1);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for o in 0..outer {
                        let base = o * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                ga[base + j * r + i] = ga[base + j * r + i] + g[base + i * c + j];
                            }
                        }
                    }
                }
            }
            Op::Binary { kind, a, b, ma, mb } => {
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => *gi,
                            Binary::Mul => *gi * bv[mb.at(i)],
                        };
                        let j = ma.at(i);
                        ga[j] = ga[j] + d;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        let d = match kind {
                            Binary::Add => *gi,
                            Binary::Sub => -*gi,
                            Binary::Mul => *gi * av[ma.at(i)],
                        };
                        let j = mb.at(i);
                        gb[j] = gb[j] + d;
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (d, gi) in ga.iter_mut().zip(g) {
                        *d = *d + *gi * *c;
                    }
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (d, gi) in ga.iter_mut().zip(g) {
                        *d = *d + *gi;
                    }
                }
            }
            Op::Relu { a } => {
                let av = val(*a);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        if *x > F::zero() {
                            *d = *d + *gi;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let av = val(*a);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        *d = *d + *gi * gelu_grad(*x);
                    }
                }
            }
            Op::Exp { a } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *d = *d + *gi * *y;
                    }
                }
            }
            Op::Log { a } => {
                let av = val(*a);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, gi), x) in ga.iter_mut().zip(g).zip(av) {
                        *d = *d + *gi / *x;
                    }
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let w = *out.shape().last().unwrap();
                let wf = F::of(w as f64);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let y = &out.data()[r * w..(r + 1) * w];
                        let gr = &g[r * w..(r + 1) * w];
                        let mean_g = gr.iter().copied().sum::<F>() / wf;
                        let mean_gy = gr.iter().zip(y).map(|(a, b)| *a * *b).sum::<F>() / wf;
                        for i in 0..w {
                            let d = &mut ga[r * w + i];
                            *d = *d + *is * (gr[i] - mean_g - y[i] * mean_gy);
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let w = *out.shape().last().unwrap();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((dst, y), gr) in ga.chunks_mut(w).zip(out.data().chunks(w)).zip(g.chunks(w)) {
                        let dot = y.iter().zip(gr).map(|(a, b)| *a * *b).sum::<F>();
                        for i in 0..w {
                            dst[i] = dst[i] + y[i] * (gr[i] - dot);
                        }
                    }
                }
            }
            Op::L2Normalize { a, width } => {
                let av = val(*a);
                let eps = F::of(crate::COSINE_EPS);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((dst, x), gr) in ga.chunks_mut(*width).zip(av.chunks(*width)).zip(g.chunks(*width)) {
                        let n = norm(x);
                        let den = n + eps;
                        let xg = x.iter().zip(gr).map(|(a, b)| *a * *b).sum::<F>();
                        let corr = if n > F::zero() { xg / (n * den * den) } else { F::zero() };
                        for i in 0..*width {
                            dst[i] = dst[i] + gr[i] / den - x[i] * corr;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for d in ga.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    let s = g[0] / F::of(ga.len().max(1) as f64);
                    for d in ga.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::SumAxis { a, outer, len, inner } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for o in 0..*outer {
                        for l in 0..*len {
                            let base = (o * len + l) * inner;
                            for i in 0..*inner {
                                ga[base + i] = ga[base + i] + g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for (p, len) in parts {
                    if let Some(gp) = self.grad_buf(grads, *p) {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut gp[o * len * inner..(o + 1) * len * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d = *d + *s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, outer, len, start, take, inner } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for o in 0..*outer {
                        let dst = &mut ga[(o * len + start) * inner..(o * len + start + take) * inner];
                        let src = &g[o * take * inner..(o + 1) * take * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
            }
            Op::Gather { a, idx } => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (i, gi) in idx.iter().zip(g) {
                        if *i != GATHER_ZERO {
                            ga[*i] = ga[*i] + *gi;
                        }
                    }
                }
            }
            Op::Cosine { a, b, width } => {
                let (av, bv) = (val(*a), val(*b));
                let eps = F::of(crate::COSINE_EPS);
                let w = *width;
                let rows = g.len();
                let mut da = vec![F::zero(); av.len()];
                let mut db = vec![F::zero(); bv.len()];
                for r in 0..rows {
                    let x = &av[r * w..(r + 1) * w];
                    let y = &bv[r * w..(r + 1) * w];
                    let (nx, ny) = (norm(x), norm(y));
                    let den = nx * ny + eps;
                    let p = x.iter().zip(y).map(|(a, b)| *a * *b).sum::<F>();
                    let s = g[r];
                    // d/dx [p / (|x||y| + eps)]
                    let cx = if nx > F::zero() { p * ny / (nx * den * den) } else { F::zero() };
                    let cy = if ny > F::zero() { p * nx / (ny * den * den) } else { F::zero() };
                    for i in 0..w {
                        da[r * w + i] = s * (y[i] / den - x[i] * cx);
                        db[r * w + i] = s * (x[i] / den - y[i] * cy);
                    }
                }
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for (d, v) in ga.iter_mut().zip(&da) {
                        *d = *d + *v;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for (d, v) in gb.iter_mut().zip(&db) {
                        *d = *d + *v;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let c = self.nodes[*logits].value.shape()[1];
                if let Some(gl) = self.grad_buf(grads, *logits) {
                    for (r, (t, w)) in targets.iter().zip(weights).enumerate() {
                        if *w == F::zero() {
                            continue;
                        }
                        let scale = g[0] * *w;
                        for j in 0..c {
                            let onehot = if j == *t { F::one() } else { F::zero() };
                            gl[r * c + j] = gl[r * c + j] + scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let s = F::of(2.0) * g[0] / F::of(av.len().max(1) as f64);
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, x), y) in ga.iter_mut().zip(av).zip(bv) {
                        *d = *d + s * (*x - *y);
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for ((d, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *d = *d - s * (*x - *y);
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    F::of(0.5) * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let k = F::of(0.044715);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = F::of(0.5);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * k * x * x)
}

pub(crate) fn norm<F: Real>(x: &[F]) -> F {
    x.iter().map(|v| *v * *v).sum::<F>().sqrt()
}

/// Cosine similarity with the zero-vector guard used throughout.
pub fn cosine<F: Real>(x: &[F], y: &[F]) -> F {
    let p = x.iter().zip(y).map(|(a, b)| *a * *b).sum::<F>();
    p / (norm(x) * norm(y) + F::of(crate::COSINE_EPS))
}

fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    m + row.iter().map(|x| (*x - m).exp()).sum::<F>().ln()
}

pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s = s + *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input_with_grad(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mse_of_identical_inputs_is_zero_with_zero_grad() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input_with_grad(Tensor::new(vec![4], vec![0.3, 1.0, -1.0, 2.0]).unwrap()).unwrap();
        let l = g.mse(x, x).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut g: Graph<f32> = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 5]));
        match g.matmul(a, b) {
            Err(NumericsError::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_intermediate_is_reported() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        match g.log(x) {
            Err(NumericsError::NonFinite { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn broadcasting_add_and_its_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.input_with_grad(Tensor::from_fn(&[2, 3, 2], |i| i as f64)).unwrap();
        let b = g.input_with_grad(Tensor::new(vec![2, 1, 2], vec![10.0, 20.0, 30.0, 40.0]).unwrap()).unwrap();
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data()[..4], [10.0, 21.0, 12.0, 23.0]);
        assert_eq!(g.value(y).data()[6..8], [36.0, 47.0]);
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn cosine_zero_guard() {
        let z = [0.0f64; 4];
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(cosine(&z, &x), 0.0);
        assert!((cosine(&x, &x) - 1.0).abs() < 1e-9);
        let nx: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((cosine(&x, &nx) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn frozen_params_receive_no_gradient_and_unused_get_zero() {
        let mut frozen = ParamMap::new();
        frozen.insert("w".into(), Tensor::<f64>::full(&[2], 3.0));
        let mut train = ParamMap::new();
        train.insert("a".into(), Tensor::<f64>::full(&[2], 1.0));
        train.insert("unused".into(), Tensor::<f64>::full(&[5], 1.0));
        let mut g: Graph<f64> = Graph::new();
        g.bind(&train, true).bind(&frozen, false);
        let a = g.param("a").unwrap();
        let w = g.param("w").unwrap();
        let y = g.mul(a, w).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.params.get("a").unwrap().data(), &[3.0, 3.0]);
        assert!(grads.params.get("w").is_none());
        assert_eq!(grads.params.get("unused").unwrap().data(), &[0.0; 5]);
    }
}
