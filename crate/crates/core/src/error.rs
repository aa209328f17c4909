use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("parameter sets are not merge-compatible: {0}")]
    Incompatible(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("label value out of range: {0}")]
    LabelRange(String),

    #[error("degenerate domain spec: {0}")]
    DegenerateSpec(String),

    #[error("incompatible class counts: source has {source_classes}, target has {target_classes}")]
    IncompatibleClasses {
        source_classes: usize,
        target_classes: usize,
    },

    #[error("missing mask for image `{0}`")]
    MissingMask(String),

    #[error("missing prerequisite artifact: {}", .0.display())]
    MissingPrerequisite(PathBuf),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("output already exists: {} (pass --overwrite to replace it)", .0.display())]
    OutputExists(PathBuf),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error for {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors raised by a numerical failure (NaN/Inf) rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

pub(crate) fn ensure_finite<'a>(values: impl IntoIterator<Item = &'a f64>, what: &str) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
