use thiserror::Error;

use crate::diff::DiffError;
use crate::synth::DatasetError;
use crate::train::CheckpointError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: DiffError,
    },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{0}` holds non-finite values")]
    NonFiniteParam(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("invalid label: {0}")]
    Label(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{phase}: non-finite loss at iteration {iteration}")]
    Diverged { phase: &'static str, iteration: usize },
    #[error("target identity labels were read {count} times during unsupervised training")]
    TargetLabelAccess { count: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
