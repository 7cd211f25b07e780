//! Optimizer, learning-rate schedule, checkpoints and the three training
//! stages: contrastive pretraining on real inputs and text (A), alignment of
//! the generated flow to the real one (B), and the downstream probe (C).

mod checkpoint;
mod config;
mod optim;
mod pipeline;

pub use checkpoint::{
    fingerprint_bytes, Checkpoint, Lineage, Phase, Progress, Stage, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{lr_at, PhaseSteps, Schedule, TrainConfig};
pub use optim::{adamw_step, clip_grad_norm, AdamW, OptimizerState};
pub use pipeline::{
    align, config_fingerprint, cross_entropy, derive_seed, finetune_downstream, initialize,
    model_dims, pretrain_real, run_from_pretrained, run_pipeline, run_stage, LossRecord,
    PipelineRun, StageRun,
};
