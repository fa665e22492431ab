use thiserror::Error;

/// Errors raised by the monitoring library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An input violated an operation's domain (out-of-range loss, bad index, invalid config).
    #[error("domain error: {0}")]
    Domain(String),
    /// A numerical routine failed to converge.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A serialized document could not be decoded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

/// Rejects values outside `[0, 1]` (including NaN).
pub(crate) fn check_unit(z: f64, what: &str) -> Result<()> {
    if (0.0..=1.0).contains(&z) {
        Ok(())
    } else {
        Err(domain(format!("{what} must lie in [0, 1], got {z}")))
    }
}

pub(crate) fn check_open_unit(x: f64, what: &str) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("{what} must lie in (0, 1), got {x}")))
    }
}
