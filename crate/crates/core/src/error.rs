use std::io;

use thiserror::Error;

/// Errors surfaced by every stage of the discovery pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in `{op}` at node {node}: {detail}")]
    ShapeMismatch {
        op: &'static str,
        node: usize,
        detail: String,
    },

    #[error("backward requires a scalar output, node {node} has shape {shape:?}")]
    NotScalarOutput { node: usize, shape: Vec<usize> },

    #[error("state became non-finite at step {step} (component {component})")]
    NonFiniteState { step: usize, component: usize },

    #[error("non-finite loss in {component}: {detail}")]
    NonFiniteLoss { component: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence of length {len} is too short, need at least {need}")]
    SequenceTooShort { len: usize, need: usize },

    #[error("{points} points are too few for k = {k}")]
    TooFewPoints { points: usize, k: usize },

    #[error("point cloud is degenerate: {0}")]
    DegenerateCloud(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sample counts differ: {left} vs {right}")]
    SampleMismatch { left: usize, right: usize },

    #[error("joint dimension {dim} exceeds the KDE limit of {max}")]
    DimensionTooHigh { dim: usize, max: usize },

    #[error("no fitted expression for latent dimension {0}")]
    FitMissing(usize),

    #[error("expression references unbound variable `{0}`")]
    UnboundVariable(String),

    #[error("every candidate expression evaluated to a non-finite value")]
    NoValidExpression,

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("unsupported container version {0}")]
    VersionUnsupported(u32),

    #[error("fingerprint mismatch for {artifact}: expected {expected}, found {found}")]
    FingerprintMismatch {
        artifact: String,
        expected: String,
        found: String,
    },

    #[error("step `{step}` failed: {source}")]
    Step {
        step: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used in CLI error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NotScalarOutput { .. } => "NotScalarOutput",
            Error::NonFiniteState { .. } => "NonFiniteState",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::Config(_) => "ConfigError",
            Error::SequenceTooShort { .. } => "SequenceTooShort",
            Error::TooFewPoints { .. } => "TooFewPoints",
            Error::DegenerateCloud(_) => "DegenerateCloud",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::SampleMismatch { .. } => "SampleMismatch",
            Error::DimensionTooHigh { .. } => "DimensionTooHigh",
            Error::FitMissing(_) => "FitMissing",
            Error::UnboundVariable(_) => "UnboundVariable",
            Error::NoValidExpression => "NoValidExpression",
            Error::CorruptContainer(_) => "CorruptContainer",
            Error::VersionUnsupported(_) => "VersionUnsupported",
            Error::FingerprintMismatch { .. } => "FingerprintMismatch",
            Error::Step { source, .. } => source.kind(),
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
