use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {reason}")]
    InvalidBox { reason: String },

    #[error("model_weights has {got} entries but {expected} models were supplied")]
    WeightArityMismatch { expected: usize, got: usize },

    #[error("invalid fusion parameters: {0}")]
    InvalidParams(String),

    #[error("consensus quality requested for an empty source subset")]
    EmptySubset,

    #[error(
        "consensus focus needs at least two sources, got {0}; a single source takes the whole \
         weight 1 - alpha_extended"
    )]
    DegenerateEnsemble(usize),

    #[error("every source has zero contribution; weights are undefined")]
    AllZeroContribution,

    #[error("fused output has no entry for target image `{0}`")]
    MissingImage(String),

    #[error("ground truth contains no boxes")]
    EmptyGroundTruth,

    #[error("{}line {line}: {reason}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Parse {
        path: Option<PathBuf>,
        line: usize,
        reason: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid scenario: {0}")]
    Spec(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Internal,
    Config,
    Data,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Internal => 1,
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
        }
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::WeightArityMismatch { .. }
            | Error::InvalidParams(_)
            | Error::DegenerateEnsemble(_)
            | Error::Config(_)
            | Error::Spec(_) => ErrorKind::Config,
            Error::InvalidBox { .. }
            | Error::MissingImage(_)
            | Error::EmptyGroundTruth
            | Error::Parse { .. }
            | Error::Io { .. } => ErrorKind::Data,
            Error::EmptySubset | Error::AllZeroContribution => ErrorKind::Internal,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: Option<PathBuf>, line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            path,
            line,
            reason: reason.into(),
        }
    }
}
