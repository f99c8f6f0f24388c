//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum Error {
    /// File could not be read or written.
    Io { path: PathBuf, source: std::io::Error },
    /// A line of an input file did not parse; `line` is 1-based.
    Parse { path: PathBuf, line: usize, message: String },
    /// Token ids could not be mapped back to text.
    Detokenize(String),
    /// An operation with an undefined result on empty input was given one.
    EmptyInput(String),
    /// Tensor shapes disagree with the model configuration.
    ShapeMismatch(String),
    /// A token id is outside the model's vocabulary.
    VocabExceeded { max_id: u32, vocab_size: usize },
    /// Training produced a non-finite loss.
    NonFiniteLoss { epoch: usize, sample_id: usize },
    /// A finite-difference probe evaluated to a non-finite loss.
    NonFiniteProbe { coordinate: usize },
    /// A configuration value is out of range or inconsistent.
    InvalidConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io { path, source } => write!(f, "i/o error on {}: {source}", path.display()),
            Error::Parse { path, line, message } => {
                write!(f, "parse error at {}:{line}: {message}", path.display())
            }
            Error::Detokenize(msg) => write!(f, "detokenize failed: {msg}"),
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::VocabExceeded { max_id, vocab_size } => {
                write!(f, "token id {max_id} outside vocabulary of size {vocab_size}")
            }
            Error::NonFiniteLoss { epoch, sample_id } => {
                write!(f, "non-finite loss at epoch {epoch}, sample {sample_id}")
            }
            Error::NonFiniteProbe { coordinate } => {
                write!(f, "non-finite loss while probing parameter coordinate {coordinate}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
