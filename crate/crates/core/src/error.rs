use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("sequence shorter than clip: length {len} < required {required}")]
    SequenceTooShort { len: usize, required: usize },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: String, index: usize },

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}
