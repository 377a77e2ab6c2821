//! Numerical core: tensors, a reverse-mode differentiation tape, Adam, named
//! RNG streams, a finite-difference gradient oracle and the binary tensor and
//! checkpoint formats.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod opsuite;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{fd_check, fd_compare, forward_backward, FdReport, Objective};
pub use io::{decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor, load_checkpoint, load_tensor, save_checkpoint, save_tensor, write_atomic, CHECKPOINT_MAGIC, TENSOR_MAGIC};
pub use graph::{cosine, softmax_in_place, Grads, Graph, Var, GATHER_ZERO};
pub use params::{clip_grad_norm, Adam, ParamMap, ParamStore};
pub use rng::RngStream;
pub use tensor::{Real, Tensor};

/// Added to the denominator of every cosine similarity and normalisation.
pub const COSINE_EPS: f64 = 1e-8;
