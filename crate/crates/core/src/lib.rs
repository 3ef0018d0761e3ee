//! Unsupervised lesion segmentation on chest CT by subtracting the lung
//! probability maps of two independently trained networks: one trained on
//! normal anatomy, one on diseased anatomy. Voxels the diseased-anatomy model
//! calls lung but the normal-anatomy model does not are lesion candidates.

pub mod config;
pub mod error;
pub mod lesion;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
