use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("non-finite value produced by {op}")]
    Numeric { op: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("unknown raw label value {value} for dataset `{dataset}`")]
    Encoding { value: u16, dataset: String },

    #[error("degenerate loss: no annotated (sample, class) pair in batch")]
    DegenerateLoss,

    #[error("AUC undefined: need at least one positive and one negative volume")]
    UndefinedAuc,

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("missing input files: {}", display_paths(.0))]
    Ingestion(Vec<PathBuf>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn numeric(op: impl Into<String>) -> Self {
        Error::Numeric { op: op.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// Prefix a numeric error with the layer that produced it.
    pub(crate) fn in_layer(self, layer: &str) -> Self {
        match self {
            Error::Numeric { op } => Error::Numeric {
                op: format!("{layer}/{op}"),
            },
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// 1 for bad configuration, 2 for data/format/shape problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric { .. } | Error::DegenerateLoss | Error::UndefinedAuc => 3,
            Error::Manifest(_)
            | Error::Encoding { .. }
            | Error::Format { .. }
            | Error::Ingestion(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Shape(_)
            | Error::Index { .. } => 2,
            Error::Config(_) => 1,
        }
    }
}
