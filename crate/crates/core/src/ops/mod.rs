//! Forward and backward kernels for every layer type in the network.
//!
//! Each op is a pure function of its inputs and a parameter record. Backward
//! functions take the forward input (not the output) plus the upstream
//! gradient, and only compute the input gradient when asked, which lets a
//! frozen trunk skip that work entirely.

pub mod activation;
pub mod batchnorm;
pub mod concat;
pub mod conv;
pub mod dense;
pub mod depthwise;
pub mod loss;
pub mod pool;

pub use activation::{activation, activation_backward, ActivationKind};
pub use batchnorm::{batchnorm, batchnorm_backward, BatchNormCache, BatchNormGrads, BatchNormOutput, BatchNormParams};
pub use concat::{concat_channels, split_channels};
pub use conv::{conv2d, conv2d_backward, ConvGrads, ConvParams};
pub use dense::{fully_connected, fully_connected_backward, DenseGrads, DenseParams};
pub use depthwise::{depthwise_conv2d, depthwise_conv2d_backward, DepthwiseGrads, DepthwiseParams};
pub use loss::{softmax, softmax_cross_entropy, softmax_cross_entropy_grad};
pub use pool::{global_pool, global_pool_backward, pool, pool_backward, GlobalPoolKind, PoolKind, PoolParams};

use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Whether batch normalization uses batch statistics (and updates its running
/// averages) or the stored running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

/// Elementwise sum of equally shaped tensors (residual connections).
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(dim_err!("cannot add {:?} and {:?}", a.shape(), b.shape()));
    }
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}
