//! Minimal CPU neural-network toolkit: dense tensors, a handful of layers
//! with hand-written backward passes, a U-Net with optional CBAM attention,
//! and AdamW.
//!
//! Everything is generic over [`Real`] so that training runs in `f32` while
//! gradient checks run in `f64` on the very same code.

pub mod error;
pub mod layers;
pub mod optim;
pub mod param;
pub mod real;
pub mod tensor;
pub mod unet;

pub use error::{NnError, Result};
pub use layers::activation::Activation;
pub use layers::attention::{Cbam, CbamConfig, ChannelAttention, SpatialAttention};
pub use optim::{AdamW, AdamWConfig};
pub use param::{GradMode, Module, Param};
pub use real::{DType, Real};
pub use tensor::Tensor;
pub use unet::{UNet, UNetConfig, UNetTape};
