//! Self-supervised losses, the optimizer, and the three training paradigms:
//! ANN training, retraining of a converted SNN, and direct spiking training.

mod data;
mod loss;
mod optim;
mod run;

pub use data::{Dataset, Sequence, SyntheticSet, WindowSample};
pub use loss::{
    contrast_loss, contrast_loss_tape, smoothness_loss, smoothness_loss_tape, total_loss, total_loss_tape,
    ContrastLoss, LossBreakdown, LossConfig,
};
pub use optim::Adam;
pub use run::{
    bisnn_train, direct_stbp_train, evaluate_loss, stbp_train, train_ann, HistoryRow, LossHistory, TrainConfig,
};
pub use crate::tensor::ops::{arctan_step as surrogate_spike, arctan_step_grad as surrogate_spike_grad};
