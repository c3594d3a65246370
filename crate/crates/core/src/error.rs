use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({x1}, {y1}, {x2}, {y2}): {reason}")]
    InvalidBox {
        x1: f64,
        y1: f64,
        x2: f64,
        y2: f64,
        reason: &'static str,
    },

    #[error("boxes do not overlap; interaction region is undefined")]
    NoOverlap,

    #[error("invalid map resolution {0}; must be at least 2")]
    InvalidResolution(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown label {label:?}; not in the {catalog} catalog")]
    UnknownLabel { label: String, catalog: &'static str },

    #[error("catalog mismatch: {0}")]
    CatalogMismatch(String),

    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("box lies entirely outside the frame")]
    OutOfFrame,

    #[error("agent placement infeasible after {0} retries")]
    Placement(usize),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("corrupt file {path}: {msg}")]
    CorruptFile { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn corrupt(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::CorruptFile {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
