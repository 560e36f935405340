//! Variational autoencoder toolkit built on a small reverse-mode autodiff
//! engine: ELBO and Info-VAE objectives, posterior-collapse diagnostics,
//! latent regression analysis, and high-dimensional geometry demos.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod cli;
mod codec;
pub mod config;
pub mod datasets;
pub mod error;
pub mod hypersphere;
pub mod networks;
pub mod objective;
pub mod trainer;

pub use autodiff::{Graph, Tensor, Var};
pub use error::{Error, Result};
