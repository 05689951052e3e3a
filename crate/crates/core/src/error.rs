use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (dimension mismatch, index
    /// out of range, non-finite input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    /// The rejection model cannot be inverted for the requested probability.
    #[error("threshold inversion error: {0}")]
    Inversion(String),

    #[error("protocol error in `{field}`: {message}")]
    Protocol { field: String, message: String },

    #[error("serialization error: {0}")]
    Serialization(String),

    #[error(transparent)]
    Transport(#[from] crate::proto::TransportError),

    #[error("report error: {0}")]
    Report(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn protocol(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Protocol {
            field: field.into(),
            message: message.into(),
        }
    }
}
