use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mission: {0}")]
    InvalidMission(String),

    #[error("invalid wisdom key {0:?}: must match [A-Za-z_][A-Za-z0-9_]*")]
    InvalidWisdomKey(String),

    #[error("wisdom value for {0:?} contains a NUL byte")]
    WisdomValueNul(String),

    #[error("malformed arguments for tool {tool:?}: {reason}")]
    MalformedToolArguments { tool: String, reason: String },

    #[error("unknown tool {0:?}")]
    UnknownTool(String),

    #[error("failed to spawn {what}: {source}")]
    SpawnFailure {
        what: String,
        #[source]
        source: io::Error,
    },

    #[error("exec of {path} failed: {source}")]
    ExecFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("unknown job handle {0}")]
    UnknownHandle(u64),

    #[error("provider exhausted after {attempts} attempts: {last}")]
    ProviderExhausted { attempts: u32, last: String },

    #[error("could not decode provider response: {0}")]
    Decode(String),

    #[error("mock script {path}: {reason}")]
    MockScript { path: PathBuf, reason: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
