use std::io;

use crate::protocol::ProtocolError;
use crate::query::QueryError;
use crate::sdf::SdfError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed path: {0}")]
    MalformedPath(String),
    #[error("dtn count must be at least 1")]
    ZeroDtnCount,
    #[error("path escapes backend root: {0}")]
    EscapesRoot(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("not visible to requester: {0}")]
    NotVisible(String),
    #[error("already exists: {0}")]
    Exists(String),
    #[error("record {path} belongs to shard {expected}, not {actual}")]
    WrongShard {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("unknown namespace: {0}")]
    UnknownNamespace(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("bad name: {0}")]
    BadName(String),
    #[error("shard unavailable: {0}")]
    ShardUnavailable(String),
    #[error("index queue is full")]
    QueueFull,
    #[error("lock held: {0}")]
    LockHeld(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("remote error {code}: {message}")]
    Remote { code: u16, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Sdf(#[from] SdfError),
    #[error(transparent)]
    Query(#[from] QueryError),
}

impl Error {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Errors a caller can reasonably fix by changing their input.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. }
                | Error::Remote { .. }
                | Error::ShardUnavailable(_)
                | Error::Protocol(_)
                | Error::QueueFull
        )
    }
}

pub(crate) trait IoContext<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn ctx(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::io(context(), e))
    }
}
