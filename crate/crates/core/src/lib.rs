//! Volumetric brain-lesion segmentation: a 2D-pretrainable ResNet encoder
//! lifted to 3D, a depth-aware decoder, dice-loss training, sliding-window
//! inference, preprocessing and evaluation.

pub mod cli;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod network;
pub mod preprocess;
pub mod nifti;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod volume;
pub mod weights;

pub use error::{Error, Result};
