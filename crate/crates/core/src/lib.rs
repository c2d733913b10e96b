//! Core library for the gaff pipeline: an explicit Gaussian scene model with a
//! geometry-conditioned semantic feature field, differentiable tile-based
//! splatting of colors and low-dimensional (LD) semantic features, data-driven
//! codebook construction, codebook-guided attention retrieval of language
//! features, two-stage training, and open-vocabulary querying in 2D and 3D.
//!
//! All randomness flows through seeded, per-purpose streams ([`rng`]) and all
//! reductions run in a fixed order, so every entry point is bit-deterministic
//! for a given seed regardless of thread count.

pub mod attention;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod math;
pub mod preprocess;
pub mod query;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod tensorio;
pub mod train;

pub use error::{Error, Result};
pub use scene::{Camera, GaussianSplat, SceneModel, ViewSupervision};
