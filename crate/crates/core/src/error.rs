use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}, column {column} (field `{field}`): {msg}")]
    Parse {
        line: usize,
        column: usize,
        field: String,
        msg: String,
    },

    #[error("unknown field `{0}` (strict mode; pass --lenient to ignore)")]
    UnknownField(String),

    #[error("unsupported {format} version {found} (expected {expected})")]
    Version {
        format: &'static str,
        found: u64,
        expected: u64,
    },

    #[error("bad magic bytes in {format} file (found {found:?})")]
    Magic {
        format: &'static str,
        found: Vec<u8>,
    },

    #[error("binary `{binary}`: function `{function}` references unknown {kind} `{id}`")]
    DanglingRef {
        binary: String,
        function: String,
        kind: &'static str,
        id: String,
    },

    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown function `{0}`")]
    UnknownFunction(String),

    #[error("missing embedding for node `{0}`")]
    MissingEmbedding(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("malformed {format} file: {msg}")]
    Malformed { format: &'static str, msg: String },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors that indicate a bug rather than bad input.
    pub fn is_internal(&self) -> bool {
        matches!(self, Error::Tape(_) | Error::Shape(_))
    }
}
