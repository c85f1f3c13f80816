use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OtoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OtoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("unsupported structure: {0}")]
    UnsupportedStructure(String),

    #[error("state error: {0}")]
    State(String),

    #[error("numerical failure at iteration {iteration}: {detail}")]
    NumericalFailure { iteration: usize, detail: String },

    #[error("layer {layer} would have width 0 after pruning ({detail}); set keep_one to retain its largest group")]
    DegenerateLayer { layer: usize, detail: String },

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("oracle did not converge: {0}")]
    OracleFailure(String),

    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<OtoError>,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<OtoError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl OtoError {
    pub(crate) fn at_layer(self, index: usize) -> Self {
        OtoError::Layer {
            index,
            source: Box::new(self),
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        OtoError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OtoError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn invalid_arg(msg: impl Into<String>) -> OtoError {
    OtoError::InvalidArgument(msg.into())
}
