use std::path::PathBuf;

use iclip_core::CoreError;
use iclip_numerics::NumericsError;
use thiserror::Error;

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown stage `{0}`")]
    UnknownStage(String),

    #[error("stage `{stage}` needs {path}, produced by stage `{producer}`; run `{producer}` first")]
    MissingArtifact {
        stage: String,
        path: PathBuf,
        producer: String,
    },

    #[error("stage `{stage}` modified its input `{input}`")]
    InputMutated { stage: String, input: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<NumericsError> for PipelineError {
    fn from(e: NumericsError) -> Self {
        PipelineError::Core(e.into())
    }
}
