//! Per-op gradient cases for the finite-difference oracle.
//!
//! Each case draws small random shapes and inputs from its seed and reduces
//! the op output with a fixed random projection, so every output coordinate
//! contributes a distinct weight to the loss.

use std::sync::Arc;

use crate::error::Result;
use crate::gradcheck::{fd_check, Objective};
use crate::graph::{Graph, Var, GATHER_ZERO};
use crate::params::ParamMap;
use crate::rng::RngStream;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Bmm,
    BmmTransposed,
    Transpose,
    Add,
    Sub,
    Mul,
    Affine,
    Scale,
    AddScalar,
    Relu,
    Gelu,
    Exp,
    Log,
    LayerNorm,
    Softmax,
    Sum,
    Mean,
    SumAxis,
    Concat,
    Narrow,
    Gather,
    Reshape,
    Cosine,
    L2Normalize,
    CrossEntropy,
    Mse,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::MatMul,
        OpKind::Bmm,
        OpKind::BmmTransposed,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Affine,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Exp,
        OpKind::Log,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAxis,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::Gather,
        OpKind::Reshape,
        OpKind::Cosine,
        OpKind::L2Normalize,
        OpKind::CrossEntropy,
        OpKind::Mse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Bmm => "bmm",
            OpKind::BmmTransposed => "bmm_t",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Affine => "affine",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAxis => "sum_axis",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
            OpKind::Cosine => "cosine",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Mse => "mse",
        }
    }
}

pub struct OpCase {
    kind: OpKind,
    dims: [usize; 4],
    targets: Vec<usize>,
    weights: Vec<f32>,
    gather_idx: Arc<[usize]>,
    projection: Vec<f32>,
}

fn rand_tensor(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| (lo + (hi - lo) * rng.uniform()) as f32)
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = 0.1 + 0.9 * rng.uniform();
        if rng.uniform() < 0.5 {
            -m as f32
        } else {
            m as f32
        }
    })
}

impl OpCase {
    /// The case and its (trainable) inputs `x` and, for binary ops, `y`.
    pub fn new(kind: OpKind, seed: u64) -> (OpCase, ParamMap) {
        let mut rng = RngStream::new(seed, kind.name());
        let dims = [2 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3)];
        let [a, b, c, e] = dims;
        let mut p = ParamMap::new();
        let mut put = |name: &str, t: Tensor| {
            p.insert(name.to_string(), t);
        };
        let mut targets = Vec::new();
        let mut weights = Vec::new();
        let mut gather_idx: Arc<[usize]> = Arc::from(Vec::new());
        match kind {
            OpKind::MatMul => {
                put("x", rand_tensor(&mut rng, &[a, b, c], -1.0, 1.0));
                put("y", rand_tensor(&mut rng, &[c, e], -1.0, 1.0));
            }
            OpKind::Bmm => {
                put("x", rand_tensor(&mut rng, &[a, b, c], -1.0, 1.0));
                put("y", rand_tensor(&mut rng, &[a, c, e], -1.0, 1.0));
            }
            OpKind::BmmTransposed => {
                put("x", rand_tensor(&mut rng, &[a, b, c], -1.0, 1.0));
                put("y", rand_tensor(&mut rng, &[a, e, c], -1.0, 1.0));
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                put("x", rand_tensor(&mut rng, &[a, b, c], -1.0, 1.0));
                put("y", rand_tensor(&mut rng, &[a, 1, c], -1.0, 1.0));
            }
            OpKind::Affine => {
                put("x", rand_tensor(&mut rng, &[a, b], -1.0, 1.0));
                put("y", rand_tensor(&mut rng, &[b, c], -1.0, 1.0));
                put("z", rand_tensor(&mut rng, &[c], -1.0, 1.0));
            }
            OpKind::Relu => put("x", away_from_zero(&mut rng, &[a, b, c])),
            OpKind::Log => put("x", rand_tensor(&mut rng, &[a, b], 0.5, 2.0)),
            OpKind::Cosine | OpKind::Mse => {
                put("x", rand_tensor(&mut rng, &[a, b + 2], -1.0, 1.0));
                put("y", rand_tensor(&mut rng, &[a, b + 2], -1.0, 1.0));
            }
            OpKind::L2Normalize | OpKind::LayerNorm | OpKind::Softmax => {
                put("x", rand_tensor(&mut rng, &[a, b + 2], -1.0, 1.0));
            }
            OpKind::Concat => {
                put("x", rand_tensor(&mut rng, &[a, b, c], -1.0, 1.0));
                put("y", rand_tensor(&mut rng, &[a, e, c], -1.0, 1.0));
            }
            OpKind::CrossEntropy => {
                let classes = c + 3;
                put("x", rand_tensor(&mut rng, &[a * b, classes], -2.0, 2.0));
                targets = (0..a * b).map(|_| rng.below(classes)).collect();
                weights = (0..a * b).map(|i| if i == 0 || rng.uniform() < 0.8 { 1.0 } else { 0.0 }).collect();
            }
            OpKind::Gather => {
                let n = a * b * c;
                put("x", rand_tensor(&mut rng, &[n], -1.0, 1.0));
                let idx: Vec<usize> = (0..2 * n)
                    .map(|_| if rng.uniform() < 0.2 { GATHER_ZERO } else { rng.below(n) })
                    .collect();
                gather_idx = Arc::from(idx);
            }
            _ => put("x", rand_tensor(&mut rng, &[a, b, c], -1.0, 1.0)),
        }
        let mut case = OpCase {
            kind,
            dims,
            targets,
            weights,
            gather_idx,
            projection: Vec::new(),
        };
        // Size the projection from a forward pass.
        let n = {
            let mut g: Graph<f32> = Graph::new();
            g.bind(&p, true);
            let out = case.op_output(&mut g).expect("op case builds");
            g.value(out).numel()
        };
        case.projection = (0..n).map(|_| rng.normal() as f32).collect();
        (case, p)
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    fn op_output<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        let [a, b, c, _] = self.dims;
        let x = g.param("x")?;
        Ok(match self.kind {
            OpKind::MatMul => {
                let w = g.param("y")?;
                g.matmul(x, w)?
            }
            OpKind::Bmm => {
                let w = g.param("y")?;
                g.bmm(x, w, false)?
            }
            OpKind::BmmTransposed => {
                let w = g.param("y")?;
                g.bmm(x, w, true)?
            }
            OpKind::Transpose => g.transpose(x)?,
            OpKind::Add => {
                let w = g.param("y")?;
                g.add(x, w)?
            }
            OpKind::Sub => {
                let w = g.param("y")?;
                g.sub(x, w)?
            }
            OpKind::Mul => {
                let w = g.param("y")?;
                g.mul(x, w)?
            }
            OpKind::Affine => {
                let w = g.param("y")?;
                let bias = g.param("z")?;
                g.affine(x, w, bias)?
            }
            OpKind::Scale => g.scale(x, F::of(-1.7))?,
            OpKind::AddScalar => g.add_scalar(x, F::of(0.3))?,
            OpKind::Relu => g.relu(x)?,
            OpKind::Gelu => g.gelu(x)?,
            OpKind::Exp => g.exp(x)?,
            OpKind::Log => g.log(x)?,
            OpKind::LayerNorm => g.layer_norm(x, 1e-5)?,
            OpKind::Softmax => g.softmax(x)?,
            OpKind::Sum => g.sum(x)?,
            OpKind::Mean => g.mean(x)?,
            OpKind::SumAxis => g.sum_axis(x, 1)?,
            OpKind::Concat => {
                let w = g.param("y")?;
                g.concat(&[x, w], 1)?
            }
            OpKind::Narrow => g.narrow(x, 2, 1, c - 1)?,
            OpKind::Gather => g.gather(x, self.gather_idx.clone(), &[2 * a * b * c])?,
            OpKind::Reshape => g.reshape(x, &[a * b, c])?,
            OpKind::Cosine => {
                let w = g.param("y")?;
                g.cosine(x, w)?
            }
            OpKind::L2Normalize => g.l2_normalize(x)?,
            OpKind::CrossEntropy => {
                let w: Vec<F> = self.weights.iter().map(|v| F::of(*v as f64)).collect();
                g.cross_entropy(x, &self.targets, &w)?
            }
            OpKind::Mse => {
                let w = g.param("y")?;
                g.mse(x, w)?
            }
        })
    }
}

impl Objective for OpCase {
    fn loss<F: Real>(&self, g: &mut Graph<'_, F>) -> Result<Var> {
        let out = self.op_output(g)?;
        let shape = g.shape(out).to_vec();
        let r = g.constant(Tensor::new(shape, self.projection.clone())?.cast());
        let y = g.mul(out, r)?;
        g.sum(y)
    }
}

/// Central step for the single-op cases.
pub const OP_FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct OpSuiteRow {
    pub op: &'static str,
    pub seeds: usize,
    pub max_rel_err: f64,
}

/// Runs every op case for seeds `0..seeds` with central step `h`.
pub fn run_op_suite(seeds: u64, h: f64) -> Result<Vec<OpSuiteRow>> {
    let mut rows = Vec::new();
    for kind in OpKind::ALL {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let (case, params) = OpCase::new(kind, seed);
            let rep = fd_check(&case, &params, h, 64, seed)?;
            worst = worst.max(rep.max());
        }
        rows.push(OpSuiteRow {
            op: kind.name(),
            seeds: seeds as usize,
            max_rel_err: worst,
        });
    }
    Ok(rows)
}
