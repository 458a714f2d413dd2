use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (dimensions, ranges, signs).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Evaluation outside the domain of a model function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A numerical routine failed (non-finite iterate, failed factorization).
    #[error("numerical failure: {message}")]
    Numerical { message: String, trace_len: usize },

    /// Configuration is syntactically valid but semantically unusable.
    #[error("invalid configuration field `{field}`: {message}")]
    Config { field: String, message: String },

    /// Configuration or data file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A learning run aborted; the seed and episode allow exact replay.
    #[error("system {system} (seed {seed}) failed in episode {episode}: {source}")]
    Episode {
        system: usize,
        seed: u64,
        episode: usize,
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: msg.into(),
        }
    }

    pub(crate) fn numerical(msg: impl Into<String>, trace_len: usize) -> Self {
        Error::Numerical {
            message: msg.into(),
            trace_len,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
