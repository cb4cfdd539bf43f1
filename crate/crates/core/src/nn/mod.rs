//! Minimal tensor engine with reverse-mode differentiation, and the 3D U-Net
//! denoiser built on it.
//!
//! ```
//! use voxdiff::nn::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.variable(Tensor::new(vec![3], vec![1.0, 2.0, 3.0])?);
//! let loss = g.weighted_sse(x, &[0.0; 3], &[0.5; 3])?;
//! let grads = g.backward(loss)?;
//! assert_eq!(grads.get(x).data(), &[1.0, 2.0, 3.0]);
//! # Ok::<(), voxdiff::Error>(())
//! ```

mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;
mod unet;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, Var};
pub use kernels::GN_EPS;
pub use params::{Binder, Init, Initializer, ParamSource, ParamStore};
pub use tensor::Tensor;
pub use unet::{sinusoidal_embedding, UNet, UNetConfig, Variant};
