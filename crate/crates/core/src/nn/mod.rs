//! A small deterministic CNN engine: conv, max-pool, dropout and dense
//! layers, trained with SGD or Adam on softmax cross-entropy.

mod data;
mod gradcheck;
mod model;
pub(crate) mod net;
mod spec;
mod train;

use thiserror::Error;

pub use data::{load_cifar, load_idx, parse_cifar, parse_idx, LabeledDataset, Split};
pub use gradcheck::{gradient_check, relative_deviation, GradCheck, FD_STEP};
pub use model::Model;
pub use net::{argmax, softmax, LayerParams, ParamInfo, ParamKind};
pub use spec::{Activation, ArchitectureSpec, LayerSpec, Padding};
pub use train::{train, train_with_probe, EpochRecord, Hyper, Optimizer, TrainingLog, TrainingRun};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    Spec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
}
