use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Syntax or schema error in a config file.
    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    /// A configuration value violates an invariant.
    #[error("invalid config field `{field}`: {message}")]
    InvalidField {
        field: &'static str,
        message: String,
    },

    #[error("unknown preset `{0}` (expected one of: switch-large-128, nllb-moe)")]
    UnknownPreset(String),

    /// A malformed or inconsistent routing-trace record.
    #[error("trace record {record}: {message}")]
    Trace { record: usize, message: String },

    #[error("{0}")]
    Routing(String),

    #[error("arithmetic overflow computing {0}")]
    Overflow(&'static str),

    #[error("{0}")]
    Schedule(String),

    #[error(transparent)]
    Codec(#[from] crate::ndp::isa::CodecError),

    #[error("address offset {offset:#x} outside {region} region of {capacity:#x} bytes")]
    AddressOutOfRange {
        region: &'static str,
        offset: u64,
        capacity: u64,
    },

    #[error("device: {0}")]
    Device(String),

    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),

    #[error("unknown sweep key `{0}`")]
    UnknownSweepKey(String),

    #[error("{0}")]
    Sweep(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn field(field: &'static str, message: impl Into<String>) -> Self {
        Error::InvalidField {
            field,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
