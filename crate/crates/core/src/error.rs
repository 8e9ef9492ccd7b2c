use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// `line` fields are 1-based positions in the originating text source. For
/// in-memory construction they are the 1-based record position.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("line {line}: event at ({x}, {y}) lies outside the {width}x{height} sensor")]
    OutOfBounds {
        line: usize,
        x: u64,
        y: u64,
        width: u16,
        height: u16,
    },

    #[error("line {line}: timestamp {t} precedes previous timestamp {previous}")]
    Unordered { line: usize, t: u64, previous: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("descriptor has zero norm; cosine distance is undefined")]
    DegenerateDescriptor,

    #[error("window family {0} contains no events to align against")]
    Alignment(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no ground truth available for query at {t_us} us")]
    MissingGroundTruth { t_us: u64 },

    #[error("{0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
