//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A config document failed validation; `key` names the offending entry.
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    /// The document could not be parsed at all.
    #[error("config parse: {0}")]
    Parse(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A structural assumption on the data was violated (non-binary
    /// adjacency, weights off the simplex, empty mode list, ...).
    #[error("structural validation: {0}")]
    Structure(String),

    /// A transition-rate matrix broke the generator sign/row-sum rules.
    #[error("generator vertex {vertex}, row {row}: {message}")]
    Generator {
        vertex: usize,
        row: usize,
        message: String,
    },

    /// An operation needed the feedback gain but the model has none.
    #[error("missing feedback gain: {0}")]
    MissingGain(String),

    #[error("not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("solver: {0}")]
    Solver(String),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn dimension(message: impl Into<String>) -> Self {
        Error::Dimension(message.into())
    }

    pub fn structure(message: impl Into<String>) -> Self {
        Error::Structure(message.into())
    }
}
