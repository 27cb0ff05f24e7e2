//! Unsupervised stereo matching for resolution-asymmetric image pairs.
//!
//! The crate covers degradation simulation, differentiable warping,
//! photometric and feature-metric losses, a small cost-volume network with a
//! hand-written autodiff tape, the staged self-boosting trainer, feature-space
//! diagnostics and the usual disparity metrics.

pub mod autodiff;
pub mod config;
pub mod datasets;
pub mod degradation;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod imagecore;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
