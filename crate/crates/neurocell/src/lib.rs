//! Cell identification pipeline: two-channel image fusion, U-Net style
//! segmentation, connected-component patch extraction and freeze-point
//! transfer classification of cells into excitatory / glial / inhibitory.
//!
//! Core numerics are generic over the scalar type via [`scalar::Scalar`];
//! training runs in `f32`, gradient checking in `f64`.

pub mod cli;
pub mod error;
pub mod imaging;
pub mod netgraph;
pub mod rng;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision tensor, the training type.
pub type Tensor32 = tensor::Tensor<f32>;
/// Double-precision tensor, the gradient-check type.
pub type Tensor64 = tensor::Tensor<f64>;
