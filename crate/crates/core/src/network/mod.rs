//! Three-branch fusion network.
//!
//! A densely connected shared encoder extracts features from each source
//! image. Two task branches (multi-modal and digital-photography) made of
//! windowed-attention blocks refine the concatenated pair features in
//! lockstep; on odd layers each branch adds a λ-scaled cross-attention read of
//! the other branch's running features. The main branch's output feeds the
//! global decoder, while the reconstruction decoder maps shared features back
//! to the image.

mod attention;
mod checkpoint;
mod model;
pub(crate) mod ops;
mod params;

use std::fmt;
use std::str::FromStr;

pub use attention::{shift_mask, window_partition, window_reverse, windowed_attention};
pub use checkpoint::{
    checkpoint_size, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
};
pub use model::{Gifnet, PairOutputs};
pub use params::{Init, ModelParams, ParamSpec, ParamView};

use crate::error::{Error, Result};

/// Channels fed to the shared encoder; single-channel inputs are replicated.
pub const ENCODER_INPUT_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub base_channels: usize,
    /// Number of densely connected conv blocks in the shared encoder.
    pub enc_layers: usize,
    /// Attention layers per task branch; must be even.
    pub branch_layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            enc_layers: 3,
            branch_layers: 4,
            embed_dim: 32,
            heads: 2,
            window: 8,
            mlp_ratio: 2.0,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.base_channels == 0 || self.enc_layers == 0 || self.embed_dim == 0 || self.heads == 0
        {
            return bad("channel, layer and head counts must be positive".into());
        }
        if self.branch_layers == 0 || !self.branch_layers.is_multiple_of(2) {
            return bad(format!(
                "branch_layers must be even and positive, got {}",
                self.branch_layers
            ));
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.window < 2 || !self.window.is_multiple_of(2) {
            return bad(format!(
                "window must be even and at least 2, got {}",
                self.window
            ));
        }
        if self.mlp_ratio.is_nan() || self.mlp_ratio <= 0.0 || self.mlp_hidden() == 0 {
            return bad(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            ));
        }
        Ok(())
    }

    /// Channel width of the shared encoder output.
    pub fn shared_channels(&self) -> usize {
        self.base_channels * self.enc_layers
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f32 * self.mlp_ratio).round() as usize
    }

    /// Layers are 1-indexed; odd layers carry the cross-branch interaction.
    pub fn is_cross_layer(layer: usize) -> bool {
        layer % 2 == 1
    }

    pub fn cross_layers(&self) -> impl Iterator<Item = usize> {
        (1..=self.branch_layers).filter(|l| Self::is_cross_layer(*l))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Branch {
    /// Multi-modal (infrared/visible) branch.
    Mm,
    /// Digital-photography (multi-focus) branch.
    Dp,
}

impl Branch {
    pub fn prefix(self) -> &'static str {
        match self {
            Branch::Mm => "mm",
            Branch::Dp => "dp",
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::Mm => Branch::Dp,
            Branch::Dp => Branch::Mm,
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::Mm => "MM",
            Branch::Dp => "DP",
        })
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mm" => Ok(Branch::Mm),
            "dp" => Ok(Branch::Dp),
            _ => Err(Error::InvalidArgument(format!("unknown branch `{s}`"))),
        }
    }
}
