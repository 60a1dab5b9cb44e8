use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its documented domain (non-positive sigma,
    /// tail ratio outside (0,1), shift not on the cell grid, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// An operation that needs strictly positive weights saw a zero one.
    #[error("infeasible density: {0}")]
    InfeasibleDensity(String),

    /// Two arguments were built on different grids.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A shift magnitude exceeded the unit sensitivity interval.
    #[error("shift out of range: {0}")]
    ShiftOutOfRange(String),

    /// The cost budget cannot be met by any density on the given grid.
    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    /// A moment series has no finite value at the requested order.
    #[error("unbounded moment: {0}")]
    MomentUnbounded(String),

    /// A mechanism file failed schema validation.
    #[error("schema validation failed for field `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn schema(field: &str, reason: impl Into<String>) -> Self {
        Error::Schema {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}
