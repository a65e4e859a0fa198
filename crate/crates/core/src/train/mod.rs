//! Losses, data splits, class rebalancing, the optimizer and training loops.

pub mod loss;
pub mod optim;
pub mod oversample;
pub mod split;
pub mod trainer;

pub use loss::{bce_loss, loss_and_grads, output_loss};
pub use optim::Adam;
pub use oversample::{oversample_benign, Labeled};
pub use split::{split_dataset, Split, SplitConfig, SplitUnit};
pub use trainer::{
    evaluate, fit, train_classifier, train_segmentation, EpochRecord, Example, TrainConfig, TrainHistory,
};
