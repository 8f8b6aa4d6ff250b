use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CgnError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid causal model: table `{table}`: {reason}")]
    InvalidSpec { table: String, reason: String },

    #[error("impossible evidence: {0}")]
    ImpossibleEvidence(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate histogram: image has a single intensity")]
    DegenerateHistogram,

    #[error("empty foreground")]
    EmptyForeground,

    #[error("degenerate denominator: h*w - 1 = 0")]
    DegenerateDenominator,

    #[error("non-finite value in `{term}`")]
    NonFinite { term: String },

    #[error("training diverged at epoch {epoch}, step {step}: non-finite `{term}`")]
    Diverged { epoch: usize, step: usize, term: String },

    #[error("missing checkpoint `{0}`")]
    MissingCheckpoint(PathBuf),

    #[error("empty dataset requested")]
    EmptyDataset,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image `{path}`: {message}")]
    Image { path: PathBuf, message: String },

    #[error("parse error in `{path}`: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = CgnError> = std::result::Result<T, E>;

impl CgnError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CgnError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CgnError::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
