use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Missing or unreadable files, including image files.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::NotFound(_) | Error::Image(image::ImageError::IoError(_))
        )
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }
}
