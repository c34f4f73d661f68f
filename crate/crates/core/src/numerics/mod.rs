//! Differentiable computation core: tensors, a reverse-mode tape, layers,
//! optimizers, schedules and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{Gradients, Init, ParamId, ParamStore};
pub use tensor::{argmax, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numerical fault: {0}")]
    NumericalFault(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}
