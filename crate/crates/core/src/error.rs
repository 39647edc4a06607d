use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("operation requires a non-empty mask")]
    EmptyMask,

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("invalid mask encoding: {0}")]
    Rle(String),

    #[error("endpoint call `{call}` failed: {source}")]
    Endpoint {
        call: String,
        #[source]
        source: EndpointError,
    },

    #[error("every segmenter output was empty; no concepts to explain")]
    EmptyConceptSet,

    #[error("{count} concepts exceed the exact Shapley limit of {max}; lower the concept cap")]
    TooManyConcepts { count: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn endpoint(call: impl Into<String>, source: EndpointError) -> Self {
        Error::Endpoint {
            call: call.into(),
            source,
        }
    }
}

/// Failures surfaced by an oracle connection.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EndpointError {
    #[error("no response within {0} ms")]
    Timeout(u64),

    #[error("malformed frame: {0}")]
    Malformed(String),

    #[error("protocol version mismatch: engine speaks {expected}, endpoint speaks {found}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("endpoint lacks required capability `{0}`")]
    MissingCapability(String),

    #[error("remote error {code}: {message}")]
    Remote { code: i64, message: String },

    #[error("transport failure: {0}")]
    Transport(String),

    #[error("connection closed by endpoint")]
    Closed,
}
