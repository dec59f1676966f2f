//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer dimensions do not line up.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    /// A class label lies outside `[0, num_classes)`.
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    /// An argument failed validation.
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    /// An IDX file carries an unexpected magic number.
    #[error("{path}: bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    /// A data file is internally inconsistent (e.g. image/label count mismatch).
    #[error("inconsistent data: {0}")]
    DataConsistency(String),

    /// A numeric invariant was violated (NaN/Inf where finiteness is promised).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A client-local update failed during a federated round.
    #[error("client {client_id} failed in round {round}: {source}")]
    ClientFailure {
        round: usize,
        client_id: usize,
        #[source]
        source: Box<Error>,
    },

    /// A config file or override could not be parsed or validated.
    #[error("config error at {location}: {message}")]
    Config { location: String, message: String },

    /// Two CSV reports have incompatible schemas.
    #[error("report schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        actual: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
