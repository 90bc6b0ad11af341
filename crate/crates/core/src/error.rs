use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse failure class, used for CLI exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input: config, data files, arguments, stage ordering.
    Validation,
    /// Something failed while running: backend, transport, IO during writes.
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid slot name {0:?}")]
    InvalidSlot(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown slot {slot:?} (dialogue {dialogue_id}, turn {turn})")]
    UnknownSlot {
        slot: String,
        dialogue_id: String,
        turn: usize,
    },

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("inconsistent gold annotations: {0}")]
    Inconsistent(String),

    #[error("turn {turn} out of range for dialogue {dialogue_id} ({len} turns)")]
    TurnOutOfRange {
        dialogue_id: String,
        turn: usize,
        len: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0}")]
    Prompt(String),

    #[error("malformed completion item {item:?}")]
    MalformedItem { item: String },

    #[error("retrieval: {0}")]
    Retrieval(String),

    #[error("embedding failed for {example_id}: {msg}")]
    Embedding { example_id: String, msg: String },

    #[error("missing recording for digest {0}")]
    MissingRecording(String),

    #[error("digest collision for {0}: recorded text differs")]
    DigestCollision(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("server error (status {status}): {body}")]
    Server { status: u16, body: String },

    #[error("backend: {0}")]
    Backend(String),

    #[error("missing stored hypothesis for exemplar {0}")]
    MissingHypothesis(String),

    #[error("missing turn in records for dialogue {dialogue_id}: expected turn {expected}")]
    MissingTurn { dialogue_id: String, expected: usize },

    #[error("unknown dialogue id {0:?}")]
    UnknownDialogue(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stage `{stage}` requires {what}; run `{needs}` first")]
    StageDependency {
        stage: String,
        what: String,
        needs: String,
    },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("interrupted")]
    Interrupted,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: &str, source: Error) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(source),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::MissingRecording(_)
            | Error::DigestCollision(_)
            | Error::Transport(_)
            | Error::Server { .. }
            | Error::Backend(_)
            | Error::Embedding { .. }
            | Error::Interrupted => ErrorClass::Runtime,
            Error::Stage { source, .. } => source.class(),
            // Reading a missing input is a validation failure; failing to write is runtime.
            Error::Io { source, .. } => match source.kind() {
                std::io::ErrorKind::NotFound => ErrorClass::Validation,
                _ => ErrorClass::Runtime,
            },
            _ => ErrorClass::Validation,
        }
    }
}
