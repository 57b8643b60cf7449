//! Attention-schema vision transformer and its control variant.

mod checkpoint;
mod config;
mod model;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry};
pub use config::AsnnConfig;
pub use model::{
    AsnnModel, ForwardOptions, ForwardTrace, ForwardVars, CLASS_TOKEN, DECISION_CONTROL, ENCODER,
    MLP_HEAD, PATCH_EMBED, POS_EMBED, PREDICTIVE, RECURRENT,
};
pub use train::{
    combine_losses, combined_loss, evaluate, freeze_except_head, head_accuracy, predict,
    trace_loss, train, train_head, train_step, Example, LossVars, TrainLog, TrainOptions,
    EVAL_SEED,
};
