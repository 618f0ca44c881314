use thiserror::Error;

/// Framework-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Caller violated an API contract (bad arguments, mismatched dimensions).
    #[error("usage: {0}")]
    Usage(String),
    /// Backend-level communication failure (socket error, aborted world).
    #[error("transport: {0}")]
    Transport(String),
    /// Ranks disagree on the collective being executed.
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("incompatible schema: {0}")]
    SchemaMismatch(String),
    /// A particle left the domain through a non-periodic face.
    #[error("particle gid {gid} is outside all sub-domains on a non-periodic axis")]
    OutOfDomain { gid: u64 },
    /// Physically invalid state detected by a client (overlap, blow-up).
    #[error("physics: {0}")]
    Physics(String),
}

impl Error {
    /// Stable machine-readable category, reported on stderr by the CLIs.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Usage(_) => "usage",
            Error::Transport(_) => "transport",
            Error::Protocol(_) => "protocol",
            Error::Io(_) => "io",
            Error::CorruptFile(_) => "corrupt-file",
            Error::SchemaMismatch(_) => "schema-mismatch",
            Error::OutOfDomain { .. } => "out-of-domain",
            Error::Physics(_) => "physics",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}
