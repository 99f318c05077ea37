use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("channel {channel} is degenerate (standard deviation {sd:e} at or below threshold)")]
    DegenerateChannel { channel: usize, sd: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid band: {0}")]
    InvalidBand(String),

    #[error("series too short for filtering: {samples} samples, need more than {needed}")]
    TooShort { samples: usize, needed: usize },

    #[error("word tokens are not sorted by onset (token {index})")]
    UnsortedWords { index: usize },

    #[error("requested {k} components from data of width {width}")]
    RankDeficient { k: usize, width: usize },

    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("missing feature `{0}`")]
    MissingFeature(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("tape has already been consumed by a backward pass")]
    StaleTape,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("stimulus has no segment other than the matched one")]
    NoNegativesAvailable,

    #[error("unknown subject {0}")]
    UnknownSubject(u32),

    #[error("validation set is empty after excluding stimuli seen in training")]
    EmptyValidation,

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
