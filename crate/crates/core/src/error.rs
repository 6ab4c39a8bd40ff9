use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("parameters without gradient: {}", .0.join(", "))]
    MissingGradient(Vec<String>),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("image dimensions {height}x{width} are not divisible by codec factor {factor}")]
    IndivisibleDims {
        height: usize,
        width: usize,
        factor: usize,
    },
    #[error("expected {expected} channels, got {found}")]
    ChannelCount { expected: usize, found: usize },
    #[error("mask is not binary")]
    NonBinaryMask,
    #[error("mask is empty")]
    EmptyMask,

    #[error("token `{0}` is not registered in the vocabulary")]
    UnregisteredToken(String),
    #[error("token `{0}` is already present in the vocabulary")]
    DuplicateToken(String),
    #[error("class noun must not be empty")]
    EmptyClassNoun,

    #[error("denoiser variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("timestep {t} outside [{lo}, {hi})")]
    TimestepRange { t: usize, lo: usize, hi: usize },
    #[error("schedule needs at least 2 steps, got {0}")]
    ScheduleTooShort(usize),
    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("mask bounds [{lo}, {hi}] are infeasible for a {kind} on a {height}x{width} grid")]
    InfeasibleBounds {
        kind: &'static str,
        lo: f64,
        hi: f64,
        height: usize,
        width: usize,
    },
    #[error("mask grid {height}x{width} is too small (minimum 8x8)")]
    DegenerateSize { height: usize, width: usize },
    #[error("reference image has no foreground")]
    EmptyForeground,

    #[error("an item needs at least 3 reference views, got {0}")]
    TooFewViews(usize),
    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("missing parameters in source checkpoint: {}", .0.join(", "))]
    MissingKey(Vec<String>),
    #[error("parameter `{name}` has shape {found:?}, target expects {expected:?}")]
    ParamShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint payload checksum mismatch (stored {stored:016x}, computed {computed:016x})")]
    Checksum { stored: u64, computed: u64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("reference list is empty")]
    EmptyReferences,
    #[error("no fine-tuned checkpoint for item `{0}`")]
    MissingCheckpoint(String),
    #[error("run directory {0} is locked by another job")]
    Locked(PathBuf),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed inputs or files rather than numeric failures.
    pub fn is_data_error(&self) -> bool {
        !matches!(
            self,
            Error::ShapeMismatch { .. }
                | Error::InvalidShape { .. }
                | Error::NonScalarLoss(_)
                | Error::MissingGradient(_)
        )
    }
}
