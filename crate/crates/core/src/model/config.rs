use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Square input resolution in pixels.
    pub image_size: usize,
    /// Patch side length; must divide `image_size`.
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    /// LayerNorm epsilon inside the square root.
    pub ln_eps: f64,
    pub seed: u64,
}

pub const LN_EPS_DEFAULT: f64 = 1e-12;

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(
                "ViTConfig",
                format!(
                    "image_size {} not divisible by patch_size {}",
                    self.image_size, self.patch_size
                ),
            ));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(
                "ViTConfig",
                format!(
                    "embed_dim {} not divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        if self.ln_eps <= 0.0 {
            return Err(Error::invalid("ViTConfig", "ln_eps must be > 0"));
        }
        if self.channels == 0 || self.num_classes == 0 {
            return Err(Error::invalid("ViTConfig", "channels and num_classes must be positive"));
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length including the prepended CLS token.
    pub fn seq_len(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    /// Per-head dimension k = d / H.
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Flattened patch length fed to the embedding map.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Small config for desk-scale experiments: 32px images, 17 tokens.
    pub fn tiny(num_classes: usize) -> Self {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 16,
            num_heads: 4,
            num_layers: 4,
            num_classes,
            ln_eps: LN_EPS_DEFAULT,
            seed: 0,
        }
    }

    /// Base-shaped preset: 224px, P=16, d=768, H=12, L=12, n=197.
    pub fn base_shaped(num_classes: usize) -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            num_heads: 12,
            num_layers: 12,
            num_classes,
            ln_eps: LN_EPS_DEFAULT,
            seed: 0,
        }
    }

    /// Huge-shaped preset: 224px, P=14, d=1280, H=16, L=32, n=257.
    pub fn huge_shaped(num_classes: usize) -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 14,
            channels: 3,
            embed_dim: 1280,
            num_heads: 16,
            num_layers: 32,
            num_classes,
            ln_eps: LN_EPS_DEFAULT,
            seed: 0,
        }
    }

    /// Named presets accepted by the CLI's `random:<name>` model flag.
    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny(num_classes)),
            "base" => Ok(Self::base_shaped(num_classes)),
            "huge" => Ok(Self::huge_shaped(num_classes)),
            other => Err(Error::invalid(
                "ViTConfig::preset",
                format!("unknown preset '{other}' (expected tiny | base | huge)"),
            )),
        }
    }
}
