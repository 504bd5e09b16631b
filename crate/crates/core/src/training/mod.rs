//! Two-stage training: neutral backbone pretraining, then style training
//! with label predictors and an adversarial MI penalty.

pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod model;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointDims, EstimatorState};
pub use config::{Ablations, DataConfig, Lambdas, ModelConfig, OptimizerConfig, TrainConfig};
pub use losses::{
    compute_stage1_loss, compute_stage2_loss, EffectiveWeights, LossComponents, Stage1Loss,
    Stage2Loss,
};
pub use model::{stage2_item, LabelCounts, Predictors, Stage2ItemOutput, TtsModel};
pub use trainer::{
    build_model, load_model, run_training, RunPaths, StepMetrics, TrainOutcome, Trainer,
};
