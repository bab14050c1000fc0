use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown tap `{0}`")]
    UnknownTap(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("parse error at line {line}, column `{column}`: {msg}")]
    Parse {
        line: usize,
        column: String,
        msg: String,
    },

    /// A configuration problem, tagged with the dotted key path at fault.
    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::ShapeMismatch(format!($($arg)*))
    };
}

macro_rules! invalid_arg {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArg(format!($($arg)*))
    };
}

pub(crate) use invalid_arg;
pub(crate) use shape_err;
