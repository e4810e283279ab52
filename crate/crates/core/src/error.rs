use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value while evaluating {what}")]
    NumericOverflow { what: String },

    #[error("solution blew up at t = {time} (|x| = {norm:e})")]
    BlowUp { time: f64, norm: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown benchmark system `{0}`")]
    UnknownSystem(String),

    #[error("regression failed: {0}")]
    Regression(String),

    #[error("no cluster intersects the ball of radius {radius} around the initial state")]
    Anchoring { radius: f64 },

    #[error("cluster chain broke after piece {after}; orphaned clusters {orphaned:?}")]
    Ordering { after: usize, orphaned: Vec<usize> },

    #[error("piece {piece} is degenerate: {reason}")]
    DegeneratePiece { piece: usize, reason: String },

    #[error("every library coefficient was eliminated")]
    DegenerateModel,

    #[error("non-finite loss at step {step} (piece {piece})")]
    NonFiniteLoss { step: usize, piece: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing run artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// The innermost error, looking through stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
