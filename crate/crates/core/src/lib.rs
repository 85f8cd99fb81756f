//! Human-AI collaborative multi-modal multi-rater classification of 3D
//! MRI-like volumes.
//!
//! Modules, roughly in pipeline order:
//! - [`ndtensor`]: dense tensors, tape autodiff, optimizers
//! - [`synthgen`]: synthetic paired T1/T2 volumes with simulated raters
//! - [`volprep`]: reorientation, resampling, 3D CLAHE, crop/pad
//! - [`encoder3d`]: patch transformer + masked-autoencoder pretraining
//! - [`multirater`]: majority vote and model-weighted consensus labels
//! - [`fusion`]: T1/T2/rater feature fusion classifier and ablations
//! - [`metrics`]: accuracy, AUROC, ROC curves, bootstrap std
//! - [`pipeline`]: staged, content-hashed orchestration of all of the above

pub mod encoder3d;
pub mod error;
pub mod fusion;
pub mod manifest;
pub mod metrics;
pub mod multirater;
pub mod ndtensor;
pub mod pipeline;
pub mod synthgen;
pub mod volprep;

pub use error::{Error, Result};
