// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected layout) disagree in shape.
    #[error("dimension mismatch: {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A vector with zero norm was passed where a direction is required.
    #[error("degenerate vector: {0}")]
    Degenerate(String),

    /// Unsupported or inconsistent configuration (manifest, activation kind, toy spec).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing tensor `{0}` in bundle")]
    MissingTensor(String),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("tensor `{0}` extends past the end of the weight blob")]
    Truncated(String),

    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    /// Malformed file contents (bad magic, short header, invalid UTF-8, ...).
    #[error("format error: {0}")]
    Format(String),

    /// A file or vocabulary that cannot be used with the loaded bundle.
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// Invalid caller-supplied input (images, boxes, token references, sample counts).
    #[error("invalid input: {0}")]
    Input(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable code used by the CLI error object and the HTTP API.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Degenerate(_) => "degenerate",
            Error::Config(_) => "config",
            Error::MissingTensor(_) => "missing_tensor",
            Error::TensorShape { .. } => "tensor_shape",
            Error::Truncated(_) => "truncated",
            Error::NonFinite(_) => "non_finite",
            Error::Version { .. } => "version",
            Error::Format(_) => "format",
            Error::Compatibility(_) => "compatibility",
            Error::Input(_) => "input",
            Error::NotFound(_) => "not_found",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
        }
    }
}
