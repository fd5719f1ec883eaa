//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Scenario, fleet, or schedule validation failed.
    #[error("configuration error: {0}")]
    Config(String),

    /// A same-lane gap went non-positive after a step. This is a failsafe
    /// bug and is never silently continued.
    #[error("overlap detected at step {step}: vehicle {follower} behind {leader}, gap {gap:.4} m")]
    Overlap {
        step: u64,
        follower: u32,
        leader: u32,
        gap: f64,
    },

    /// A model or operation was handed a state outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed input file (trajectory CSV, histogram CSV, model JSON).
    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config file error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
