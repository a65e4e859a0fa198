//! Two-stage lung nodule analysis on CT volumes: a U-Net screens axial
//! slices for suspicious tissue, and an encoder classifier labels each case
//! benign or malignant from the fused slice and probability map.

pub mod annotations;
pub mod cascade;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod phantom;
pub mod rng;
pub mod train;
pub mod volume;

pub use annotations::{
    extract_slice_samples, parse_annotations, parse_labels, rasterize_mask, select_slices, Label, MaskShape,
    MaskVolume, NoduleAnnotation, SliceSample,
};
pub use error::{Error, Result};
pub use nn::{
    count_parameters, load_checkpoint, save_checkpoint, transfer_weights, ArchConfig, ArchId, Model, ModelCheckpoint,
    Tensor, UpsampleMode,
};
pub use phantom::{generate_phantom_dataset, generate_phantom_volume, PhantomSpec};
pub use volume::{load_volume, normalize_hu, CtVolume, Grid, HuWindow, NormalizedVolume};
