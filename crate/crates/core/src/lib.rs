//! Contour-conditioned multi-scale diffusion for mural restoration.
//!
//! The pipeline: extract faint stroke contours from a damaged region with a
//! 2-cluster K-means ([`contour`]), denoise with per-scale noise predictors
//! fused through learned per-pixel influence maps ([`fusion`]), refine the
//! result with a learned radial frequency filter ([`fdp`]), and score the
//! restoration with structural, color, texture and edge consistency metrics
//! ([`metrics`]). The `book/` directory of the repository walks through the
//! math chapter by chapter; its code snippets compile against this crate.

pub mod config;
pub mod contour;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod fdp;
pub mod fusion;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod rng;

pub use error::{MuralError, Result};
