use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A recorded value or a derived quantity was NaN or infinite.
    #[error("non-finite value in {0}")]
    Numeric(&'static str),
    #[error("usage error: {0}")]
    Usage(String),
    /// Every unnormalized importance weight is zero (or NaN).
    #[error("all importance weights are degenerate")]
    DegenerateWeights,
    #[error("singular-regime construction failed: achieved weight ratio {achieved:e} exceeds {required:e}")]
    Construction { achieved: f64, required: f64 },
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
}
