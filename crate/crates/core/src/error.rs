use std::path::PathBuf;

use thiserror::Error;

use crate::model::Unit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("unit mismatch: expected {expected}, found {found}")]
    UnitMismatch { expected: Unit, found: Unit },

    #[error("grid mismatch between co-registered rasters")]
    GridMismatch,

    #[error("out of model: |gamma * B_NV| = {shift_mhz} MHz reaches the zero-field splitting {d_mhz} MHz")]
    OutOfModel { shift_mhz: f64, d_mhz: f64 },

    #[error("singular geometry: field point lies on a conductor edge")]
    SingularGeometry,

    #[error("quality gate failed in stage `{stage}`: {message}")]
    QualityGate { stage: String, message: String },

    #[error("inversion kernel singular on {fraction:.1}% of retained modes; choose another NV axis or use vector data")]
    SingularKernel { fraction: f64 },

    #[error("fit did not converge: {0}")]
    NotConverged(String),

    #[error("unknown tap `{0}`")]
    UnknownTap(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}`: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e @ Error::QualityGate { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// True when the error is a data-quality gate failure (as opposed to a
    /// validation or I/O problem), looking through stage wrappers.
    pub fn is_quality_gate(&self) -> bool {
        match self {
            Error::QualityGate { .. } => true,
            Error::Stage { source, .. } => source.is_quality_gate(),
            _ => false,
        }
    }
}
