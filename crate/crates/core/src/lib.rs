//! Ghost-query retrieval: a conditional diffusion model over latent embedding
//! sequences generates audio-space queries from conditioning sequences, and
//! those queries are matched against a pooled-key index.

pub mod alignmetrics;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod latentdata;
pub mod numerics;
pub mod retrieval;

pub use error::{GdrError, Result};
