use thiserror::Error;

use crate::qnn::NeuronId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input scale {actual} does not match network input scale {expected}")]
    ScaleMismatch { expected: f64, actual: f64 },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("invalid neuron {0}")]
    InvalidNeuron(NeuronId),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("neuron {neuron} is not evenized ({detail}); run evenize before splitting")]
    NotEvenized { neuron: NeuronId, detail: String },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
