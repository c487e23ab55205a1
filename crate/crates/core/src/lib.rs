//! Core algorithms for looped multi-view object inpainting: Gaussian
//! splatting with analytic gradients, orbital camera rigs, 3D masks,
//! frame-sequence assembly, a LoRA-adapted flow-matching video denoiser,
//! Gaussian reconstruction, and image metrics.
//!
//! The crate is `no_std` (with `alloc`). The `parallel` feature pulls in
//! `std` and splits tiles, batch items and objects across a rayon pool.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod camera;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod math;
pub mod metrics;
pub mod par;
pub mod recon;
pub mod model;
pub mod render;
pub mod sequence;

pub use error::{Error, Result};
