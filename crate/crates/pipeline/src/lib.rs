//! Stage registry, configuration and artifact plumbing.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod registry;
pub mod stages;

pub use config::PipelineConfig;
pub use error::{PipelineError, Result};
pub use registry::{Registry, Report, Runner, Stage, StageContext};
pub use stages::standard_registry;
