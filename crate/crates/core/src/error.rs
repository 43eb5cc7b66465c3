use thiserror::Error;

/// Errors produced by the keyword-spotting toolkit.
#[derive(Debug, Error)]
pub enum KwsError {
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible window: {frames} frames cannot traverse a {chain_len}-state keyword chain")]
    InfeasibleWindow { frames: usize, chain_len: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported {kind} version {found} (expected {expected})")]
    UnsupportedVersion {
        kind: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

impl KwsError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        KwsError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        KwsError::Validation(msg.into())
    }

    /// True for errors caused by bad user input (as opposed to runtime failures).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            KwsError::EmptyInput(_)
                | KwsError::Validation(_)
                | KwsError::Shape(_)
                | KwsError::Format(_)
                | KwsError::UnsupportedVersion { .. }
                | KwsError::Undefined(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, KwsError>;
