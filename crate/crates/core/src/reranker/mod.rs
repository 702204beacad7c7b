//! Bag-of-tokens relevance classifier with hidden-layer dropout.

pub mod features;
pub mod io;
pub mod model;
pub mod train;

pub use features::{FeatureSpace, InputVector, Segment};
pub use io::{model_from_bytes, model_to_bytes};
pub use model::{gradient_check, ForwardMode, Gradient, ModelConfig, Params, RerankerModel};
pub use train::{
    checkpoint_steps, cyclic_lr, train, train_with_observer, Checkpoint, CheckpointView,
    LabeledExample, Schedule, TrainOutcome, TrainingConfig,
};
