use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("audio clip too short: {samples} samples, need at least {needed}")]
    ClipTooShort { samples: usize, needed: usize },
    #[error("zero-norm vector in {op}")]
    ZeroNorm { op: &'static str },
    #[error("translation failed after {attempts} attempts: {message}")]
    Translation { attempts: u32, message: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
