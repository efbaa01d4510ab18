//! Sampling-equivariant self-attention building blocks with an exact
//! earth-mover's-distance equivariance metric.
//!
//! The crate provides, bottom to top:
//! - [`tensor`]: dense f64 tensors with tape-based reverse-mode autodiff;
//! - [`nn`]: linear / batch-norm / pooling / loss primitives;
//! - [`ses`]: the sampling-equivariant self-attention layer (mask
//!   regression, mask-weighted aggregation, transformation embedding);
//! - [`rnm`]: the randomized normalization module with Q/K/V routing;
//! - [`geometry`]: 2-D affine transforms and bilinear image warping;
//! - [`emd`]: an exact transportation-simplex EMD solver over sampling
//!   graphs;
//! - [`harness`]: sampling-graph extraction and the AEMD aggregate;
//! - [`model`] / [`data`] / [`train`]: a small classification network,
//!   synthetic shapes dataset, and a reproducible SGD training loop;
//! - [`pnm`] / [`config`] / [`cli`]: portable anymap I/O and the CLI.

pub mod check;
pub mod emd;
pub mod error;
pub mod harness;
pub mod data;
pub mod model;
pub mod train;
pub mod geometry;
pub mod nn;
pub mod pnm;
pub mod rnm;
pub mod ses;
pub mod tensor;
pub(crate) mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
