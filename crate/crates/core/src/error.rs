use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A simulation exceeded a configured resource limit.
    #[error("resource limit exceeded: {message}")]
    Resource { message: String, partial: Option<String> },

    /// A numerical routine failed to converge or produced a non-finite value.
    #[error("numerical error: {0}")]
    Numeric(String),

    /// The spatial domain is too small for the requested run.
    #[error("domain too small: boundary influence {influence:.3e} exceeds {tolerance:.1e}; need x_max >= {required_x_max:.1} (x_min <= {required_x_min:.1})")]
    DomainTooSmall {
        influence: f64,
        tolerance: f64,
        required_x_min: f64,
        required_x_max: f64,
    },

    /// A profile has not yet relaxed to its limiting shape.
    #[error("not converged: {0}")]
    NotConverged(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

/// Fails with a domain error unless `cond` holds.
pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Domain(msg()))
    }
}
