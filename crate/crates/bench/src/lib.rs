//! Shared inputs for the benchmarks.

use gifnet::fixtures::synthetic_scene;
use gifnet::{ArchConfig, Image, ModelParams};

/// Visible and infrared luma of a seeded square scene.
pub fn luma_pair(size: usize) -> (Image, Image) {
    let (vis, ir) = synthetic_scene(7, size, size);
    (vis.luma(), ir.luma())
}

/// Default-architecture parameters with a fixed seed.
pub fn default_params() -> ModelParams {
    ModelParams::init(&ArchConfig::default(), 0).expect("default architecture initializes")
}
