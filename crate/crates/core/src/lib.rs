//! Inverse design of ventilated acoustic resonators.
//!
//! The crate covers the full loop: closed-form and finite-difference
//! acoustics of axisymmetric resonators, rasterized cross-section images
//! and parameter recovery, dataset generation, a small reverse-mode
//! autodiff library, the response-conditioned VAE and a dense parameter
//! regression baseline, plus the design workflows that tie them together.

pub mod acoustics;
pub mod apnn;
pub mod arvae;
pub mod detect;
pub mod dataset;
pub mod error;
pub mod fdfd;
pub mod fmtutil;
pub mod geometry;
pub mod nn;
pub mod raster;
pub mod workflows;

pub use error::{Error, Result};
