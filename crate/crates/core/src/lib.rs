//! Point-cloud detection kernels: sampling, set abstraction, BEV point dilation, hybrid
//! vote/heatmap heads, losses, synthetic scenes and evaluation.

pub mod backbone;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod heads;
pub mod losses;
pub mod model;
pub mod neck;
pub mod sampling;
pub mod scene;
pub mod scenegen;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
