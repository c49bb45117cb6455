pub mod datasetgen;
pub mod error;
pub mod fixtures;
pub mod fusion;
pub mod gradcheck;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod saliency;
pub mod trainer;

pub use error::{Error, Result};
pub use imageio::Image;
pub use network::{ArchConfig, Branch, Gifnet, ModelParams};
