use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate map: {0}")]
    DegenerateMap(String),

    #[error("map not normalized: sum = {0}")]
    Unnormalized(f64),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("validation error in record {record}: field `{field}`: {msg}")]
    Validation {
        record: String,
        field: String,
        msg: String,
    },

    #[error("template error: {0}")]
    Template(String),

    #[error("missing part `{0}` in color mask")]
    MissingPart(String),

    #[error("game construction: {0}")]
    Construction(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("id mismatch: {0}")]
    IdMismatch(String),

    #[error("tensor format: {0}")]
    Format(String),

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier for machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidGeometry(_) => "invalid-geometry",
            Error::DimMismatch(_) => "dim-mismatch",
            Error::Parameter(_) => "parameter",
            Error::DegenerateMap(_) => "degenerate-map",
            Error::Unnormalized(_) => "unnormalized",
            Error::Parse { .. } => "parse",
            Error::Validation { .. } => "validation",
            Error::Template(_) => "template",
            Error::MissingPart(_) => "missing-part",
            Error::Construction(_) => "construction",
            Error::UndefinedCorrelation(_) => "undefined-correlation",
            Error::IdMismatch(_) => "id-mismatch",
            Error::Format(_) => "format",
            Error::Diverged { .. } => "diverged",
            Error::Shape(_) => "shape",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
