use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid training data: {0}")]
    InvalidData(String),

    #[error("covariance matrix is not positive definite (largest jitter tried: {jitter:e})")]
    NotPositiveDefinite { jitter: f64 },

    #[error("optimizer reached a non-finite objective")]
    NonFiniteObjective,

    #[error("uncertain-input moments are not finite (mean {mean}, variance {variance})")]
    NonFiniteMoments { mean: f64, variance: f64 },

    #[error("moment order {order} exceeds the supported maximum {cap}")]
    MomentOrderTooLarge { order: u32, cap: u32 },

    #[error("multinomial expansion needs {count} terms, more than the cap of {cap}")]
    TooManyTerms { count: u128, cap: u128 },

    #[error("rank deficient input: covariance eigenvalue {eigenvalue:e} relative to {largest:e}")]
    RankDeficient { eigenvalue: f64, largest: f64 },

    #[error("network: {0}")]
    Network(String),

    #[error("node `{node}`: {source}")]
    Node {
        node: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing observed input `{0}`")]
    MissingObserved(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: non-finite value at row {row}, column `{column}`")]
    NonFinite {
        path: PathBuf,
        row: usize,
        column: String,
    },

    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("model file checksum mismatch")]
    Checksum,

    #[error("config: {0}")]
    Config(String),

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn in_node(self, node: &str) -> Error {
        Error::Node {
            node: node.to_string(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Innermost error, looking through node wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Node { source, .. } => source.root(),
            other => other,
        }
    }

    /// Coarse classification used by the command-line front end.
    pub fn kind(&self) -> ErrorKind {
        match self.root() {
            Error::Config(_) | Error::Network(_) | Error::InvalidKernel(_) => ErrorKind::Config,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::NonFinite { .. }
            | Error::InvalidData(_)
            | Error::MissingObserved(_)
            | Error::Version { .. }
            | Error::Checksum
            | Error::Serialization(_)
            | Error::DimensionMismatch { .. } => ErrorKind::Data,
            Error::NotPositiveDefinite { .. }
            | Error::NonFiniteObjective
            | Error::NonFiniteMoments { .. }
            | Error::MomentOrderTooLarge { .. }
            | Error::TooManyTerms { .. }
            | Error::RankDeficient { .. } => ErrorKind::Numerical,
            Error::Node { .. } => unreachable!("root() strips node wrappers"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}
