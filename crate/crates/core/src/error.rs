use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has zero norm")]
    ZeroRow { row: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("similarity matrix must be square, got {rows}x{cols}")]
    NonSquare { rows: usize, cols: usize },

    #[error("row {row} is not unit norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown example id {0}")]
    UnknownId(usize),

    #[error("mode requires a frozen pretrained tower")]
    MissingFrozenTower,

    #[error("step {step} outside schedule of {total} steps")]
    StepOutOfRange { step: usize, total: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("class {class} has {available} probe examples, {required} required")]
    InsufficientShots {
        class: usize,
        available: usize,
        required: usize,
    },

    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),

    #[error("row {row} is not a probability vector (sum {sum})")]
    NotAProbability { row: usize, sum: f64 },

    #[error("score list is empty")]
    EmptyScores,

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("matrix file has wrong magic bytes")]
    BadMagic,

    #[error("unsupported matrix file version {0}")]
    BadVersion(u32),

    #[error("matrix file is truncated")]
    TruncatedFile,

    #[error("malformed artifact: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
