use std::path::PathBuf;

use thiserror::Error;

use crate::curvature::LbfgsHistory;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure mode of the toolkit. The `Display` text of each variant
/// starts with a stable kebab-case code (`dim-mismatch`, `bad-token`, ...)
/// so logs and CLI messages can be matched mechanically; see [`Error::code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dim-mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("non-finite: {0}")]
    NonFinite(String),

    #[error("degenerate-cloud: point set has rank < 2")]
    DegenerateCloud,

    #[error("too-few-points: need at least {need}, got {got}")]
    TooFewPoints { need: usize, got: usize },

    #[error("grid-too-small: {rows}x{cols}, need at least 3x3")]
    GridTooSmall { rows: usize, cols: usize },

    #[error("bad-token: token {token} >= vocab size {vocab}")]
    BadToken { token: u32, vocab: usize },

    #[error("empty-target: sequence {index} has length {len}, need >= 2")]
    EmptyTarget { index: usize, len: usize },

    #[error("context-overflow: sequence {index} has length {len}, context is {context}")]
    ContextOverflow { index: usize, len: usize, context: usize },

    #[error("empty-batch")]
    EmptyBatch,

    #[error("invalid-spec: {0}")]
    InvalidSpec(String),

    #[error("diverged: non-finite loss at step {step}")]
    Diverged { step: usize },

    #[error("vocab-too-small: vocab {vocab}, need at least {need}")]
    VocabTooSmall { vocab: usize, need: usize },

    #[error("insufficient-data: {part} needs {need}, have {have}")]
    InsufficientData {
        part: String,
        need: usize,
        have: usize,
    },

    #[error("flat-prediction: |predicted reduction| = {0:e} < 1e-12")]
    FlatPrediction(f64),

    #[error("harvest-exhausted: {} of {target} pairs after {steps} steps", .partial.len())]
    HarvestExhausted {
        target: usize,
        steps: usize,
        partial: Box<LbfgsHistory>,
    },

    #[error("numerical-breakdown: non-finite value at pair {pair}")]
    NumericalBreakdown { pair: usize },

    #[error("empty-forget-set")]
    EmptyForgetSet,

    #[error("null-direction: |direction| = {0:e} before normalization")]
    NullDirection(f64),

    #[error("constraint-blocked-all-iterations: no step size satisfied the retain budget")]
    ConstraintBlockedAllIterations,

    #[error("flat-probe: probe gradient is zero")]
    FlatProbe,

    #[error("flat-landscape: Laplacian has zero variance")]
    FlatLandscape,

    #[error("zero-variance: {0}")]
    ZeroVariance(&'static str),

    #[error("no-checkpoints: restoration report carries no intermediate checkpoints")]
    NoCheckpoints,

    #[error("checksum: {path} ({detail})")]
    Checksum { path: PathBuf, detail: String },

    #[error("format: {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("missing-artifact: {path} (run `{hint}` first)")]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable short code, the prefix of the `Display` output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DimMismatch { .. } => "dim-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::DegenerateCloud => "degenerate-cloud",
            Error::TooFewPoints { .. } => "too-few-points",
            Error::GridTooSmall { .. } => "grid-too-small",
            Error::BadToken { .. } => "bad-token",
            Error::EmptyTarget { .. } => "empty-target",
            Error::ContextOverflow { .. } => "context-overflow",
            Error::EmptyBatch => "empty-batch",
            Error::InvalidSpec(_) => "invalid-spec",
            Error::Diverged { .. } => "diverged",
            Error::VocabTooSmall { .. } => "vocab-too-small",
            Error::InsufficientData { .. } => "insufficient-data",
            Error::FlatPrediction(_) => "flat-prediction",
            Error::HarvestExhausted { .. } => "harvest-exhausted",
            Error::NumericalBreakdown { .. } => "numerical-breakdown",
            Error::EmptyForgetSet => "empty-forget-set",
            Error::NullDirection(_) => "null-direction",
            Error::ConstraintBlockedAllIterations => "constraint-blocked-all-iterations",
            Error::FlatProbe => "flat-probe",
            Error::FlatLandscape => "flat-landscape",
            Error::ZeroVariance(_) => "zero-variance",
            Error::NoCheckpoints => "no-checkpoints",
            Error::Checksum { .. } => "checksum",
            Error::Format { .. } => "format",
            Error::MissingArtifact { .. } => "missing-artifact",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}
