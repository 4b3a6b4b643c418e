//! Feature reduction and classification of functional-connectivity data.
//!
//! Connectivity vectors are harmonized across acquisition sites with
//! empirical-Bayes ComBat, compressed into a handful of latent Gaussians by a
//! denoising variational autoencoder, and classified with SVMs and random
//! forests under hold-out, leave-one-site-out, bootstrap and permutation
//! protocols.

mod binio;
pub mod classifiers;
pub mod config;
pub mod connectome;
pub mod data;
pub mod dvae;
pub mod error;
pub mod eval;
pub mod harmonize;
pub mod nn;
pub mod pipeline;
pub mod plots;
pub mod rng;

pub use error::{Error, Result};
