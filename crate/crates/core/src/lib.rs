//! Diffusion generative priors over voxel-encoded radiance fields.
//!
//! The pipeline has two stages. Stage one fits a regularized ReLU-field
//! ([`voxgrid::VoxelGrid`]) to the posed images of every scene
//! ([`fit`]), using the differentiable volume renderer in [`render`].
//! Stage two trains a 3D U-Net denoiser ([`nn`]) as a DDPM over those grids
//! ([`diffusion`]), which can then be sampled unconditionally or steered by
//! an image observation for single-view reconstruction.
//!
//! [`scenegen`] provides procedural scenes and posed-image datasets so the
//! whole pipeline runs without external data.

pub mod camera;
pub mod diffusion;
pub mod error;
pub mod fit;
pub mod image;
pub mod nn;
pub mod render;
pub mod rng;
pub mod scenegen;
pub mod verify;
pub mod voxgrid;

pub use error::{Error, Result};
