//! Multi-omics representation learning with a variational autoencoder
//! trained on feature subsets, and tumour-type classification from the
//! learned latent space.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod objective;
pub mod subsetting;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
