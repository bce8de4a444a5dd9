// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum JsaeError {
    /// A caller-supplied argument violates a precondition (shape, range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation hit a degenerate value (zero norm, zero variance, ...).
    #[error("numeric degeneracy: {0}")]
    NumericDegeneracy(String),

    /// A finite-difference check would straddle a TopK or sign boundary.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// The activation source ran out before the requested token count.
    #[error("data exhausted: needed {needed} activations, source provided {available}")]
    DataExhausted { needed: usize, available: usize },

    /// A persisted file did not match the expected layout.
    #[error("format error in field `{field}`: {detail}")]
    Format { field: String, detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl JsaeError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Self::InvalidArgument(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::Format {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, JsaeError>;
