use alloc::string::String;
use core::fmt;

/// Error type shared by all numeric modules.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CsiError {
    /// Incompatible tensor extents. Carries a message naming both shapes.
    Dimension(String),
    /// An operation precondition was violated (non-scalar loss, value out of
    /// the quantizer domain, non-finite input, ...).
    Contract(String),
    /// Stateful object misused (backward re-run, missing gradient, ...).
    State(String),
    /// Invalid configuration value.
    Config(String),
    /// Metric undefined for the given inputs (zero-norm reference, ...).
    Metric(String),
    /// Malformed serialized payload or file.
    Format(String),
    /// Dataset generation failed (degenerate normalization range, ...).
    Generation(String),
}

impl fmt::Display for CsiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CsiError::Dimension(m) => write!(f, "dimension error: {m}"),
            CsiError::Contract(m) => write!(f, "contract error: {m}"),
            CsiError::State(m) => write!(f, "state error: {m}"),
            CsiError::Config(m) => write!(f, "config error: {m}"),
            CsiError::Metric(m) => write!(f, "metric error: {m}"),
            CsiError::Format(m) => write!(f, "format error: {m}"),
            CsiError::Generation(m) => write!(f, "generation error: {m}"),
        }
    }
}

#[cfg(any(test, feature = "std"))]
impl std::error::Error for CsiError {}
