//! Pretraining, training state and downstream evaluation.

mod metrics;
mod pretrain;
mod probe;
mod state;

pub use metrics::{compute_metrics, Metrics};
pub use pretrain::{
    batches_per_epoch, epoch_means, group_branch_active, pretrain, pretrain_observed, LossRecord,
};
pub use probe::{
    evaluate, extract_features, finetune, init_classifier, linear_probe, predict,
    softmax_cross_entropy, Evaluation, Mode,
};
pub use state::{Record, TrainState, Values};
