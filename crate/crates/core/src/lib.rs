//! Generative recommendation with a Mult-VAE whose latent user posterior is matched against a
//! Gaussian inferred from semantic embeddings.
//!
//! The crate is organised bottom-up: [`numerics`] (dense kernel, Adam, gradient checks),
//! [`data`] (ingest, splits, synthetic generator), [`distributions`] (diagonal Gaussians and
//! divergences), [`model`] (Mult-VAE and the probabilistic meta-network), [`matching`] (the
//! GODM / CPDM / MDDM objectives), [`training`] and [`evaluation`].

pub mod data;
pub mod distributions;
pub mod model;
pub mod error;
pub mod evaluation;
pub mod matching;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
