//! Deterministic dense-tensor kernel: the fixed layer set used by the
//! heatmap learner and the controllers, explicit backward passes, Adam, and
//! a central-difference gradient oracle.
//!
//! Everything here is generic over [`Scalar`] (`f32` or `f64`). Controllers
//! always run at `f64`; the learner runs at either.

mod adam;
mod gradcheck;
mod ops;
mod scalar;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{finite_diff_grad, max_relative_error, max_scaled_error};
pub use ops::{
    concat_channels, conv2d, conv2d_backward, conv2d_backward_cached, conv2d_cached, linear,
    linear_backward, mse_mean_backward, mse_per_channel, pool_max2, pool_max2_backward, relu,
    relu_backward, softmax, softmax_backward, split_channels, upsample_nearest2,
    upsample_nearest2_backward, ConvCache, ConvGeometry, ConvGrads, LinearGrads, PoolOutput,
};
pub use scalar::Scalar;
pub use tensor::Tensor;
