//! Error type shared by every module in the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// The on-disk header could not be parsed or declares an unsupported layout.
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    /// Payload ended before `expected` bytes were read.
    #[error("truncated payload: expected {expected} bytes, got {actual}")]
    TruncatedPayload { expected: usize, actual: usize },

    /// A voxel value is not a valid tissue class id.
    #[error("invalid label value {value} (class ids must be < {limit})")]
    InvalidLabel { value: u8, limit: u8 },

    /// Grid dimensions are inconsistent with each other or with a paired grid.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown feature name {0:?}")]
    UnknownFeature(String),

    /// Percentile bounds collapse (p2 == p98), so normalization is undefined.
    #[error("degenerate normalization bounds for feature {0:?}")]
    DegenerateBounds(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A guidance or metric computation produced NaN/Inf or a singular matrix.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for failures of the numerics themselves rather than of the input data.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
