use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid matrix dimensions {rows}x{cols} for {len} elements")]
    InvalidDimensions { rows: usize, cols: usize, len: usize },

    #[error("non-finite value at ({row}, {col}){}", fmt_ctx(.context))]
    NonFinite {
        row: usize,
        col: usize,
        context: Option<String>,
    },

    #[error("SVD did not converge after {iterations} iterations{}", fmt_ctx(.layer))]
    ConvergenceFailure {
        iterations: usize,
        layer: Option<String>,
    },

    #[error("rank must be at least 1")]
    InvalidRank,

    #[error("energy threshold must lie in (0, 1], got {0}")]
    InvalidThreshold(f64),

    #[error("malformed checkpoint header: {0}")]
    MalformedHeader(String),

    #[error("tensor '{name}' byte span [{start}, {end}) is invalid: {reason}")]
    SpanOutOfBounds {
        name: String,
        start: usize,
        end: usize,
        reason: String,
    },

    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),

    #[error("tensor '{name}' has shape {shape:?}, expected a non-empty 2-D shape")]
    NotTwoDimensional { name: String, shape: Vec<usize> },

    #[error("tensor '{0}' not found")]
    MissingTensor(String),

    #[error("adapter contains no layers")]
    EmptyAdapter,

    #[error("inconsistent adapter rank: {0}")]
    InconsistentRank(String),

    #[error("adapter tensor '{0}' has no matching counterpart")]
    MissingCounterpart(String),

    #[error("adapter dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("malformed adapter config: {0}")]
    MalformedConfig(String),

    #[error("adapter targets layers missing from the base checkpoint: {}", .0.join(", "))]
    MissingLayers(Vec<String>),

    #[error("{0}")]
    Usage(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

fn fmt_ctx(ctx: &Option<String>) -> String {
    match ctx {
        Some(c) => format!(" (layer '{c}')"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attach a layer name to errors that carry one.
    pub fn with_layer(self, name: &str) -> Self {
        match self {
            Error::ConvergenceFailure { iterations, .. } => Error::ConvergenceFailure {
                iterations,
                layer: Some(name.to_string()),
            },
            Error::NonFinite { row, col, .. } => Error::NonFinite {
                row,
                col,
                context: Some(name.to_string()),
            },
            Error::ShapeMismatch(msg) => Error::ShapeMismatch(format!("{name}: {msg}")),
            other => other,
        }
    }
}
