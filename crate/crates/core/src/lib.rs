//! Resolution adapters for a miniature pixel-space diffusion UNet.
//!
//! The crate bundles a small reverse-mode tensor library ([`numerics`]), a
//! UNet denoiser with a stable parameter naming scheme ([`unet`]), DDPM/DDIM
//! math ([`diffusion`]), low-rank sampler-conv adapters plus normalization
//! deltas ([`adapters`]), mixed-resolution training ([`trainer`]), a binary
//! checkpoint container ([`store`]) and evaluation helpers ([`evalbench`]).

pub mod error;
pub mod numerics;
pub mod unet;
pub mod diffusion;
pub mod adapters;
pub mod trainer;
pub mod evalbench;
pub mod store;
pub mod gradsuite;

pub use error::{Error, FormatError, Result};
