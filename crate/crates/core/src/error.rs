use std::path::PathBuf;

use crate::heig::{AccountType, InteractionType};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("call edges must target a contract account, got {src:?} -call-> {dst:?}")]
    InvalidCallTarget { src: AccountType, dst: AccountType },

    #[error("edge {src} -> {dst} references unknown account {missing}")]
    DanglingEndpoint { src: String, dst: String, missing: String },

    #[error("duplicate account id {0}")]
    DuplicateAccount(String),

    #[error("unknown account {0}")]
    UnknownAccount(String),

    #[error("invalid edge {src} -> {dst} ({kind:?}): {reason}")]
    InvalidEdge { src: String, dst: String, kind: InteractionType, reason: String },

    #[error("invalid account {id}: {reason}")]
    InvalidAccount { id: String, reason: String },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("k must lie in (0, 1], got {0}")]
    InvalidK(f64),

    #[error("requested {requested} negative seeds but only {available} labeled negatives exist")]
    InsufficientNegatives { requested: usize, available: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch { context: &'static str, expected: usize, actual: usize },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { context: &'static str, expected: (usize, usize), actual: (usize, usize) },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty training set for relation {0}")]
    EmptyTrainingSet(String),

    #[error("no CVAE model for relation {0}")]
    MissingModel(String),

    #[error("view list is empty")]
    EmptyViewList,

    #[error("loss mask is empty")]
    EmptyMask,

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("need at least {required} labeled accounts per class, class {class} has {found}")]
    TooFewLabels { class: bool, required: usize, found: usize },

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing upstream stage output: {0}")]
    MissingUpstream(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

impl Error {
    /// Stable short name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidCallTarget { .. } => "InvalidCallTarget",
            Error::DanglingEndpoint { .. } => "DanglingEndpoint",
            Error::DuplicateAccount(_) => "DuplicateAccount",
            Error::UnknownAccount(_) => "UnknownAccount",
            Error::InvalidEdge { .. } => "InvalidEdge",
            Error::InvalidAccount { .. } => "InvalidAccount",
            Error::Parse { .. } => "ParseError",
            Error::Io { .. } => "IoError",
            Error::InvalidK(_) => "InvalidK",
            Error::InsufficientNegatives { .. } => "InsufficientNegatives",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::EmptyTrainingSet(_) => "EmptyTrainingSet",
            Error::MissingModel(_) => "MissingModel",
            Error::EmptyViewList => "EmptyViewList",
            Error::EmptyMask => "EmptyMask",
            Error::EmptyInput(_) => "EmptyInput",
            Error::TooFewLabels { .. } => "TooFewLabels",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::Config(_) => "ConfigError",
            Error::MissingUpstream(_) => "MissingUpstream",
            Error::Checkpoint { .. } => "CheckpointError",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
