//! Orchestration: configuration, checkpoints, training, evaluation and the
//! bundle-adjustment lab.

pub mod balab;
pub mod checkpoint;
pub mod config;
pub mod train;

pub use balab::{LabReport, LabRow, Mode};
pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use train::{
    evaluate, finetune, load_scene, neighbors_for, pretrain, render_view, train_loop, train_step, EvalReport, Init,
    MetricsRow, Model, SceneData, TrainReport, METRICS_HEADER,
};
