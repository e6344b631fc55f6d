//! Paired synthetic haze, unlabelled real-domain images and augmentation.

pub mod augment;
pub mod dataset;
pub mod haze;
pub mod io;
pub mod procedural;

use hazekit_tape::Tensor;

/// `[batch, 3, height, width]` with values in `[0, 1]`.
pub type Image = Tensor<f32>;

pub use augment::{augment, Transform};
pub use dataset::{
    build_real_dataset, build_synthetic_dataset, BatchSampler, CleanSource, DatasetManifest, PairEntry, PairedDataset,
    RealDataset,
};
pub use haze::{apply_scattering, synthesize_haze, HazeParams, ScalarField};
pub use io::{load_png, save_png};
