use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel mismatch: expected {expected} channels, got {actual}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("missing stored activation for layer {0}")]
    MissingActivation(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("subset-sum base set of size {size} exceeds the enumeration limit of {limit}")]
    BaseSetTooLarge { size: usize, limit: usize },

    #[error("activation `{activation}` is not supported here: {reason}")]
    UnsupportedActivation { activation: String, reason: String },

    #[error("value {value} is outside the invertible range ({low:e}, {high:e}]")]
    OutsideInvertibleRange { value: f64, low: f64, high: f64 },

    #[error("degenerate target: layer {layer} has no nonzero parameters")]
    DegenerateTarget { layer: usize },

    #[error(
        "target parameter {value} in layer {layer} exceeds |theta| <= 1; \
         rescale the target (see `rescale_to_unit_range`) or shrink its weights"
    )]
    ParameterOutOfRange { layer: usize, value: f64 },

    #[error("plan and network disagree: {0}")]
    PlanMismatch(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
