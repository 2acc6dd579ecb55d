//! Building blocks of a fast image-to-video generation stack, at desk scale:
//! a deep-compression video autoencoder, a diffusion transformer with
//! layer-memory self-attention, flow-matching training with a deviation-based
//! refiner conditioning pipeline, and a convolutional latent upsampler — all
//! on a self-contained f64 reverse-mode autodiff core so every mechanism is
//! checkable with gradient oracles and algebraic identities.

pub mod error;
pub mod latent_geometry;
pub mod numerics;
pub mod optim;
pub mod params;

pub use error::{Error, Result};
