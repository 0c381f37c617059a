//! Two-branch toy detector with gated fusion.

pub mod conv;
pub mod loss;
pub mod model;
pub mod train;

pub use loss::{detection_loss, HeadOutput, LossBreakdown};
pub use model::{decode, detect, detect_slots, DetectMode, ForwardCache, ModelConfig, ToyModel};
pub use train::{fit, sample_gradient, train_step, FitOptions, TrainSample};
