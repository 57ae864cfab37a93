use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed document. `location` is `line:column` or a field path.
    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("schema error in {source_name}: {message}")]
    Schema { source_name: String, message: String },

    #[error("not applicable: {0}")]
    NotApplicable(String),

    #[error("rollout does not match directive: {0}")]
    Mismatch(String),

    #[error("instruction contains no lexicon preposition: {0:?}")]
    NoPreposition(String),

    #[error("corpus exhausted: {0}")]
    CorpusExhausted(String),

    #[error("gateway error: status {status} after {attempts} attempt(s): {message}")]
    Gateway {
        status: u16,
        attempts: u32,
        message: String,
    },

    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("no valid reasoning trace after {attempts} attempt(s): {reason}")]
    InvalidTrace { attempts: u32, reason: String },

    #[error("empty input")]
    EmptyInput,

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("sample {0} has no validated reasoning trace")]
    MissingCot(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn not_applicable(msg: impl Into<String>) -> Self {
        Error::NotApplicable(msg.into())
    }

    pub fn is_not_applicable(&self) -> bool {
        matches!(self, Error::NotApplicable(_))
    }

    /// Converts a serde_json failure into `Parse` (syntax) or `Schema` (shape).
    pub(crate) fn from_json(source_name: &str, err: serde_json::Error) -> Self {
        use serde_json::error::Category;
        match err.classify() {
            Category::Data => Error::Schema {
                source_name: source_name.to_string(),
                message: err.to_string(),
            },
            _ => Error::Parse {
                source_name: source_name.to_string(),
                location: format!("{}:{}", err.line(), err.column()),
                message: err.to_string(),
            },
        }
    }
}
