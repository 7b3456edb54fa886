use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GpoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GpoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: unsupported or malformed file: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no consensus: best hypothesis had {best} inliers, {required} required")]
    NoConsensus { best: usize, required: usize },

    #[error("point maps to the plane at infinity (w = {w:e})")]
    DegeneratePoint { w: f64 },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("non-finite loss or gradient at iteration {iteration} (nodes {nodes:?})")]
    Numerical { iteration: usize, nodes: Vec<usize> },

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("config: {0}")]
    Config(String),
}

impl GpoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GpoError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        GpoError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            GpoError::Argument(_) | GpoError::Config(_) | GpoError::Format { .. }
        )
    }
}
