//! Spatial operators: convolution, pooling variants, binomial anti-aliasing
//! kernels, bilinear upsampling and shift utilities.
//!
//! Every function here is a pure map from input tensors to a new tensor.
//! The differentiable wrappers live on [`crate::autodiff::Tape`].

mod conv;
mod kernel;
mod pool;
mod resample;

pub use conv::{conv2d, conv2d_backward, Conv2dGrads, Conv2dOptions, Padding};
pub use kernel::{
    binomial_kernel, validate_kernel, BlurKernel, KernelReport, UnsupportedKernelSize,
    SUPPORTED_BLUR_SIZES,
};
pub use pool::{
    blur_subsample, blur_subsample_backward, blurpool, dense_maxpool, dense_maxpool_indexed,
    dense_maxpool_ties, downsample, maxpool, maxpool_indexed, maxpool_ties, pool_backward, reflect,
    PoolKind, PoolSpec, PoolSpecError, Pooled,
};
pub use resample::{bilinear_upsample, bilinear_upsample_backward, circular_shift};
