//! Small decoder-only transformer with observable attention internals.

mod checkpoint;
mod config;
mod train;
mod transformer;
pub mod vocab;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use train::{accuracy, argmax, loss_and_grad, train, TrainConfig, TrainExample, TrainPoint, TrainReport};
pub use transformer::{
    log_softmax, softmax, target_logprob, BoundModel, ForwardOptions, ForwardTrace, HeadTrace, LayerParams, Model, Params,
};
pub use vocab::Vocab;
