//! Differentiable operations on [`Var`](crate::Var).

pub mod attention;
pub mod conv;
pub mod dropout;
pub mod elementwise;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod shape;
pub mod shuffle;

pub use attention::{multi_head_attention, se_gate, softmax, AttentionWeights};
pub use conv::{conv2d, conv_out_len, Conv2dOptions};
pub use dropout::dropout;
pub use elementwise::{
    activation, add, broadcast_shape, gelu, mean, mul, relu, scale, sigmoid, sub, sum, sum_to_shape, Activation,
};
pub use linear::{linear, matmul};
pub use loss::{cross_entropy, mse};
pub use norm::{batch_norm2d, layer_norm, BatchNormState, BatchStats, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use pool::{adaptive_avg_pool2d, avg_pool2d, global_avg_pool, max_pool2d, upsample_nearest, PoolOptions};
pub use shape::{concat, permute, reshape};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
