use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("CTC target infeasible: {frames} frames cannot emit {target_len} labels with {repeats} adjacent repeats")]
    Infeasible { frames: usize, target_len: usize, repeats: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input or configuration, as opposed
    /// to failures inside the library.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Internal(_) | Error::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
