//! Segmentation-feature transfer learning for small-sample image classification.
//!
//! The crate is organised bottom-up:
//!
//! * [`engine`]: tensors, differentiable layer kernels, graphs, Adam.
//! * [`nets`]: the M-Net segmentation backbone, the classifier head that runs on
//!   its features, the VGG-style baseline, and checkpoint files.
//! * [`metrics`]: weighted cross-entropy, label weights, Dice, accuracy,
//!   Cohen's kappa, F1.
//! * [`dataforge`]: synthetic phantoms, CLAHE, k-means labelling, rigid
//!   augmentation, stratified splits and the dataset file format.
//! * [`trainer`]: segmentation and classification training loops plus evaluation.

pub mod dataforge;
pub mod engine;
pub mod error;
mod io;
pub mod metrics;
pub mod nets;
pub mod trainer;

pub use error::{Error, Result};
