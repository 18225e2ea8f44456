//! Training phases, evaluation, checkpoints and end-to-end protocols.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod protocol;
pub mod train;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use config::{Ablation, AblationConfig, ContextualMode, FinalEval, Protocol, RunConfig, TrainConfig};
pub use metrics::{evaluate_metrics, Metrics};
pub use protocol::{prepare, run_protocol, Prepared, Report};
pub use train::{
    contrastive_loss, evaluate, finetune, fresh_encoder, generate_pseudo_labels, linear_evaluate, model_dims, predict,
    pretrain_tstcc, pseudo_label_checkpoint, train_catcc, train_supervised, Contextual, Objective, PhaseOutput, PseudoLabeled, StepRecord,
};
