//! Desk-scale detector used to exercise the tandem losses end to end.

pub mod checkpoint;
pub mod infer;
pub mod loss;
pub mod model;
pub mod nn;
pub mod scene;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use infer::{aggregate_and_predict, predict, predict_single, HeadSelection, ImageResult};
pub use loss::{conventional_loss, conventional_loss_grad_flat, ConvLossConfig};
pub use model::{forward_bea, Detector, ModelConfig, Predictions};
pub use scene::{generate_dataset, OodMode, Sample, SceneSpec, ShapeKind};
pub use train::{
    objective, objective_grad, train, Batch, BatchLoss, EpochRecord, History, TrainConfig,
    TrainedModel,
};
