//! A small CPU network engine: layer kernels over a channel-major tensor
//! layout, static graphs with shape inference, the architectures, and
//! checkpoints.

pub mod arch;
pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod scalar;
pub mod tensor;

pub use arch::{
    build_baseline_encdec, build_baseline_fc, build_classifier_net, build_segmentation_net, ArchConfig, ArchId,
    Model, UpsampleMode,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, transfer_weights, ModelCheckpoint, NamedTensor, TrainingMeta};
pub use model::{Graph, LayerKind, LayerSpec, Mode, Network, Shape};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Number of trainable values in a model.
pub fn count_parameters<T: Scalar>(model: &Model<T>) -> usize {
    model.count_parameters()
}
