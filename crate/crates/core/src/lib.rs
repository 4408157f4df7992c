//! Hybrid convolution / windowed-attention network for fusing two spatially
//! aligned single-channel images.
//!
//! The pipeline is a shared dilated-convolution encoder applied to both
//! inputs, a cross-modal channel attention block per branch, a
//! sigmoid-weighted branch merge and a windowed self-attention decoder ending
//! in `tanh`. Every layer carries a hand-written backward pass, so the crate
//! also contains everything needed to train the network without a tensor
//! framework.
//!
//! The crate is `no_std` + `alloc`. The default `std` feature only adds
//! batch-level parallelism through rayon; IO lives in the companion binary
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
mod linalg;
mod math;

pub mod bfm;
pub mod decoder;
pub mod encoder;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nca;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use image::{ColorSpace, ImageSample};
pub use model::{AblationFlags, FusionNet, NetworkConfig};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::{Dims4, FeatureMap, Tensor, TokenGrid};
pub use training::{Checkpoint, TrainConfig};
