//! Error type shared across the crate.
//!
//! Variants map onto process exit codes: configuration and domain errors
//! exit with 2, numerical-feasibility errors with 3, and failed acceptance
//! checks with 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad user input: malformed config, out-of-range argument, unknown key.
    #[error("config error: {0}")]
    Config(String),

    /// Parameters that are syntactically fine but outside a function's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Parameters for which the requested computation is not numerically
    /// feasible (mesh cannot be built, mollification scale unresolvable, ...).
    #[error("infeasible: {0}")]
    Infeasible(String),

    /// A built-in validation or acceptance check ran and failed.
    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Io(_) | Error::Serde(_) => 2,
            Error::Infeasible(_) => 3,
            Error::CheckFailed(_) => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(Error::Domain("x".into()).exit_code(), 2);
        assert_eq!(Error::Infeasible("x".into()).exit_code(), 3);
        assert_eq!(Error::CheckFailed("x".into()).exit_code(), 4);
    }
}
