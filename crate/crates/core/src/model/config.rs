use crate::error::{arg_err, Result};
use serde::{Deserialize, Serialize};

/// Which architectural components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    /// Predict gradient maps at each decoder scale.
    pub multi_task: bool,
    /// Merge predicted structure features back into the image branch.
    pub structure_embedding: bool,
    /// Patch attention after the residual stack.
    pub attention: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles::full()
    }
}

impl Toggles {
    pub const fn baseline() -> Self {
        Toggles { multi_task: false, structure_embedding: false, attention: false }
    }

    pub const fn multi_task() -> Self {
        Toggles { multi_task: true, structure_embedding: false, attention: false }
    }

    pub const fn with_embedding() -> Self {
        Toggles { multi_task: true, structure_embedding: true, attention: false }
    }

    pub const fn full() -> Self {
        Toggles { multi_task: true, structure_embedding: true, attention: true }
    }

    pub fn label(&self) -> &'static str {
        match (self.multi_task, self.structure_embedding, self.attention) {
            (false, false, false) => "Baseline",
            (true, false, false) => "MT",
            (true, true, false) => "MT+SE",
            (true, true, true) => "MT+SE+AT",
            (false, _, true) => "AT",
            (true, false, true) => "MT+AT",
            (false, true, false) => "SE",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub patch: usize,
    pub stride: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { patch: 3, stride: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub residual_blocks: usize,
    /// Number of decoder scales carrying structure heads, finest first.
    pub n_s: usize,
    pub attention: AttentionConfig,
    pub toggles: Toggles,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            image_size: 64,
            base_channels: 32,
            residual_blocks: 8,
            n_s: 3,
            attention: AttentionConfig::default(),
            toggles: Toggles::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "generator config";
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(arg_err(op, format!("image_size must be a positive multiple of 4, got {}", self.image_size)));
        }
        if self.base_channels == 0 {
            return Err(arg_err(op, "base_channels must be positive"));
        }
        if self.n_s == 0 || self.n_s > 3 {
            return Err(arg_err(op, format!("n_s must be in 1..=3, got {}", self.n_s)));
        }
        if self.toggles.structure_embedding && !self.toggles.multi_task {
            return Err(arg_err(op, "structure_embedding requires multi_task"));
        }
        if self.toggles.attention {
            let a = self.attention;
            if a.patch == 0 || a.patch % 2 == 0 {
                return Err(arg_err(op, format!("attention patch must be odd, got {}", a.patch)));
            }
            if a.stride == 0 {
                return Err(arg_err(op, "attention stride must be positive"));
            }
            if a.patch > self.image_size / 4 {
                return Err(arg_err(
                    op,
                    format!("attention patch {} exceeds feature size {}", a.patch, self.image_size / 4),
                ));
            }
        }
        Ok(())
    }

    /// Decoder scale indices (0 = quarter resolution) that carry structure heads.
    pub fn structure_scales(&self) -> Vec<usize> {
        if self.toggles.multi_task {
            (3 - self.n_s.min(3)..3).collect()
        } else {
            Vec::new()
        }
    }

    /// Downscale factor of a decoder scale index.
    pub fn scale_factor(scale: usize) -> usize {
        1 << (2 - scale)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { base_channels: 32 }
    }
}
