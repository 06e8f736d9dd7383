use std::path::PathBuf;
use thiserror::Error;

/// Errors for every fallible operation in the crate.
///
/// `Parse`, `Compile`, `Lookup`, `Config` and `Domain` are caller mistakes
/// (CLI exit code 2); the rest are runtime failures (exit code 3).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("compile error: {0}")]
    Compile(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error at {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::Compile(_)
                | Error::Lookup(_)
                | Error::Domain(_)
        )
    }

    /// CLI exit code: 2 for usage errors, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        if self.is_usage() {
            2
        } else {
            3
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
