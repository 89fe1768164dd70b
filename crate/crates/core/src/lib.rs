//! countlab — a desk-scale laboratory for mechanistic analysis of counting
//! in small transformers.
//!
//! The crate generates synthetic counting prompts (text lists and patch-grid
//! scenes), trains a small decoder-only transformer on them, and provides the
//! instrumentation used to study how the trained model counts: activation
//! capture and patching, causal-influence metrics, a layer-cutoff probe that
//! reads latent counts out of the residual stream, PCA/cosine geometry tools,
//! and a registry of scripted experiments with reproducible artifacts.
//!
//! Everything numeric is generic over [`linalg::Real`], runs deterministically
//! for a fixed seed, and produces bit-identical results with and without the
//! `parallel` feature.

pub mod analysis;
pub mod countscope;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod model;
pub mod activations;
pub mod metrics;
pub mod par;
pub mod train;
pub mod util;
pub mod vocab;

pub use error::{Error, Result};
pub use linalg::Real;
