use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("duplicate note id `{0}`")]
    DuplicateId(String),

    #[error("embedding length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("zero embedding vector (degenerate or empty text)")]
    ZeroVector,

    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),

    #[error("empty text passed to similarity provider `{0}`")]
    EmptyText(String),

    #[error("provider `{provider}` failed: {reason}")]
    Provider { provider: String, reason: String },

    #[error("note `{note_id}`: {source}")]
    InNote {
        note_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid template: {0}")]
    Template(String),

    #[error("invalid prompt: {0}")]
    Prompt(String),

    #[error("backend `{backend}` failed on prompt `{prompt_id}`: {reason}")]
    Backend {
        backend: String,
        prompt_id: String,
        reason: String,
    },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("unknown export format `{0}`")]
    UnknownFormat(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_note(note_id: &str, source: Error) -> Self {
        Error::InNote {
            note_id: note_id.to_string(),
            source: Box::new(source),
        }
    }

    pub(crate) fn provider(provider: &str, reason: impl ToString) -> Self {
        Error::Provider {
            provider: provider.to_string(),
            reason: reason.to_string(),
        }
    }
}
