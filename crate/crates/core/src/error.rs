use std::fmt;
use std::io;

use s2tt_autodiff::TensorError;

#[derive(Debug)]
pub enum Error {
    Tensor(TensorError),
    /// Invalid configuration value or key.
    Config(String),
    /// Text contains a symbol outside the tokenizer's alphabet.
    UnknownSymbol(char),
    /// A token id has no surface form.
    UnknownToken(u32),
    /// Assembled sequence exceeds the decoder's positional table.
    SequenceTooLong { len: usize, max: usize },
    /// Chained output lacked a marker; carries the raw text.
    ChainedParse(String),
    Checkpoint(String),
    /// Non-finite gradient or loss during training.
    NonFinite(String),
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tensor(e) => write!(f, "{e}"),
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::UnknownSymbol(c) => write!(f, "symbol {c:?} is not in the alphabet"),
            Self::UnknownToken(id) => write!(f, "token id {id} has no surface form"),
            Self::SequenceTooLong { len, max } => {
                write!(f, "sequence of length {len} exceeds max_positions {max}")
            }
            Self::ChainedParse(raw) => write!(f, "chained output missing markers: {raw:?}"),
            Self::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Self::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Self::Io(e) => write!(f, "I/O error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Tensor(e) => Some(e),
            Self::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        Self::Tensor(e)
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
