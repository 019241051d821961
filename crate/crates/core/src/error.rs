use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the embedding, cache and checkpoint file formats.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid file contents: {0}")]
    Invalid(String),
}

impl FormatError {
    /// Stable numeric code for each failure kind.
    pub fn code(&self) -> u32 {
        match self {
            FormatError::BadMagic { .. } => 1,
            FormatError::BadVersion(_) => 2,
            FormatError::Truncated(_) => 3,
            FormatError::DimensionMismatch(_) => 4,
            FormatError::Parse { .. } => 5,
            FormatError::Invalid(_) => 6,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("overfitting produced a NaN loss at iteration {iteration}")]
    NanLoss { iteration: usize },
    #[error("training diverged at episode {episode} (loss {loss:e}){}", dump_note(.dump))]
    Diverged {
        episode: usize,
        loss: f64,
        dump: Option<PathBuf>,
    },
    #[error("shape mismatch for parameter {name}: expected {expected:?}, found {found:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("format error (code {code}): {0}", code = .0.code())]
    Format(#[from] FormatError),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn dump_note(dump: &Option<PathBuf>) -> String {
    match dump {
        Some(p) => format!("; loss history written to {}", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that stem from numerics rather than inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::NanLoss { .. } | Error::Diverged { .. }
        )
    }

    /// True for failures caused by malformed or inconsistent data files.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Format(_)
                | Error::Io { .. }
                | Error::InsufficientData(_)
                | Error::ParameterShape { .. }
                | Error::MissingParameter(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
