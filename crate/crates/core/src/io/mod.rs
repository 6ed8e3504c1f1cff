//! File formats: RVOL volumes and JSON-lines record streams.

mod jsonl;
mod rvol;

pub use jsonl::{read_jsonl, write_jsonl, JsonlLine, SchemaHeader, SCHEMA_KEY};
pub use rvol::{read_rvol, write_rvol, Volume, RVOL_MAGIC, RVOL_VERSION};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

impl IoError {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
