//! Instruction/visual-change alignment on a synthetic edit corpus: corpus
//! generation, latent diffusion plumbing, feature backbones, the contrastive
//! change/instruction encoders, instruction decoding, dataset refinement and
//! an alignment-guided latent editor.

pub mod backbone;
pub mod corpus;
pub mod decoder;
pub mod diffusion;
pub mod editor;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod nn;
pub mod refiner;
pub mod train;

pub use error::{CoreError, Result};
