//! Unsupervised dynamic view synthesis from a single moving camera rig.
//!
//! A static radiance field models the rigid background; a time-conditioned
//! dynamic field models moving content together with forward and backward
//! scene flow. The two are blended by a learned per-point weight. Training
//! adds a surface-consistency term on flowed expected surface points and a
//! patch-based multi-view term rendered from perturbed virtual cameras.

pub mod autodiff;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fields;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod renderer;
pub mod rng;
pub mod synthscene;
pub mod trainer;

pub use error::{Error, Result};
