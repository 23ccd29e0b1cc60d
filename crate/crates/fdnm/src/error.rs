//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument for {op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("batch norm needs at least 2 samples in train mode, got {0}")]
    DegenerateBatch(usize),

    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),

    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("excessive imaginary residue after inverse transform: max|Im|={max_im:e}, max|Re|={max_re:e}")]
    ImaginaryResidue { max_im: f64, max_re: f64 },

    #[error("negative amplitude entry {value} at index {index}")]
    NegativeAmplitude { index: usize, value: f64 },

    #[error("{path}: {msg} at byte {offset}")]
    ImageFormat {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: id={id} tri={tri} cnm={cnm}")]
    NonFiniteLoss {
        step: usize,
        id: f64,
        tri: f64,
        cnm: f64,
    },

    #[error("label {0} violates sampler precondition: {1}")]
    BadLabel(usize, String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
