//! Small CPU tensor and layer library for the Im2Flow models.
//!
//! Every layer exposes an explicit `forward`/`backward` pair instead of a
//! taped autograd graph. Callers keep whatever activations the backward pass
//! needs. Layers are generic over [`Real`] so that the same code runs in `f32`
//! for training and in `f64` for finite-difference checks.

mod adam;
mod init;
mod layers;
mod module;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use init::SeededInit;
pub use layers::{
    concat_channels, global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace,
    softmax_cross_entropy, softmax_rows, split_channels, BatchNorm2d, BnCache, Conv2d, ConvGeom,
    ConvTranspose2x2, Linear, MaxPool2, PadMode,
};
pub use module::{copy_state, join, Module, Param, TensorKind};
pub use real::{matmul, Real};
pub use tensor::Tensor;
