//! Differentiable operations on [`Var`](crate::Var).

mod conv;
mod elementwise;
mod norm;
mod pool;
mod shape;
mod spectral;
mod temporal;

pub use conv::{conv2d, conv3d};
pub use norm::{batch_norm, BatchStats};
pub use pool::{avg_pool2d, max_pool3d, upsample_nearest2d};
pub use spectral::{dft2_magnitude, dft2_magnitude_tensor};
pub use temporal::{batched_dot, linear, softmax_last, spatial_mean_per_step, time_weighted_sum};
