use std::path::PathBuf;

/// Errors produced across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("judge transport error: {0}")]
    Transport(String),

    #[error("{path}: {} invalid line(s): {}", errors.len(), summarize(errors))]
    Validation {
        path: PathBuf,
        errors: Vec<LineError>,
    },

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// A validation failure tied to a 1-based input line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

fn summarize(errors: &[LineError]) -> String {
    let shown: Vec<String> = errors
        .iter()
        .take(5)
        .map(|e| format!("line {}: {}", e.line, e.message))
        .collect();
    let mut s = shown.join("; ");
    if errors.len() > 5 {
        s.push_str(&format!("; ... {} more", errors.len() - 5));
    }
    s
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Contract(msg.into()))
}
