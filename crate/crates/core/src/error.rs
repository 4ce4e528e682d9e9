use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("factor product mismatch for {side} dimension: expected {expected}, factors multiply to {actual}")]
    FactorProduct {
        side: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index {index} out of range (bound {bound}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite gradient in layer {layer}, {matrix} factor {factor}")]
    NonFiniteGradient {
        layer: usize,
        matrix: &'static str,
        factor: usize,
    },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint precision mismatch: file stores {file}-bit floats, runtime expects {runtime}-bit")]
    Precision { file: u8, runtime: u8 },

    #[error("config hash mismatch: checkpoint built for {found:016x}, runtime model is {expected:016x}")]
    ConfigHash { expected: u64, found: u64 },

    #[error("correctness error: {0}")]
    Correctness(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
