//! Two-stage shear-wave elastography: simulated multi-push motion, patch-based
//! reconstruction, dual-decoder denoising, losses, metrics and the training pipeline.

pub mod denoise;
pub mod error;
pub mod forge;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod patchwork;
pub mod pipeline;
pub mod recon;

pub use error::{Error, Result};
