//! Architecture description: variants, per-stream widths, modality list.

use serde::{Deserialize, Serialize};

use crate::attention::FusionVariant;
use crate::error::{Error, Result};

/// Named size presets plus a free-form desk-scale variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    T,
    S,
    B,
    Custom,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T" | "t" | "tiny" => Ok(Variant::T),
            "S" | "s" | "small" => Ok(Variant::S),
            "B" | "b" | "base" => Ok(Variant::B),
            "custom" => Ok(Variant::Custom),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

/// One input sensor: its name and rasterized channel count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityConfig {
    pub name: String,
    pub channels: usize,
}

impl ModalityConfig {
    pub fn new(name: &str, channels: usize) -> Self {
        ModalityConfig {
            name: name.to_string(),
            channels,
        }
    }
}

/// Full architecture description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Camera-branch stream channels D_s and heads H_s, streams 1..4.
    pub camera_channels: [usize; 4],
    pub camera_heads: [usize; 4],
    /// Secondary branches run a single stream at the stem resolution; its
    /// width must equal the camera's stream-1 width.
    pub secondary_channels: usize,
    pub secondary_heads: usize,
    /// Window side K for self-attention and fusion.
    pub window: usize,
    /// Stem width and the bottleneck widths of stage 1.
    pub stem_channels: usize,
    pub stage1_mid_channels: usize,
    pub stage1_out_channels: usize,
    /// Bottleneck blocks in stage 1; transformer blocks per stream in each
    /// of stages 2-4.
    pub stage1_blocks: usize,
    pub stage_blocks: usize,
    pub ffn_ratio: usize,
    /// The primary sensor feeding the camera branch.
    pub primary: ModalityConfig,
    /// Secondary sensors, one lightweight branch each.
    pub modalities: Vec<ModalityConfig>,
    pub fusion_variant: FusionVariant,
    pub fuse_only_high_res: bool,
    pub early_fusion: bool,
    pub neck_channels: usize,
    /// Attention/FFN projection biases (identity tests run bias-free).
    pub bias: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Preset for a named variant with the given sensors.
    pub fn preset(variant: Variant, primary: ModalityConfig, modalities: Vec<ModalityConfig>) -> Self {
        let (camera_channels, camera_heads, secondary_channels, secondary_heads) = match variant {
            Variant::T => ([18, 36, 72, 144], [1, 2, 4, 8], 18, 1),
            Variant::S => ([32, 64, 128, 256], [1, 2, 4, 8], 32, 1),
            Variant::B => ([78, 156, 312, 624], [2, 4, 8, 16], 78, 2),
            Variant::Custom => ([4, 8, 16, 32], [1, 2, 4, 8], 4, 1),
        };
        let (stem, s1_mid, s1_out, neck) = match variant {
            Variant::Custom => (8, 8, 32, 32),
            _ => (64, 64, 256, 256),
        };
        ModelConfig {
            variant,
            camera_channels,
            camera_heads,
            secondary_channels,
            secondary_heads,
            window: 7,
            stem_channels: stem,
            stage1_mid_channels: s1_mid,
            stage1_out_channels: s1_out,
            stage1_blocks: 2,
            stage_blocks: 2,
            ffn_ratio: 4,
            primary,
            modalities,
            fusion_variant: FusionVariant::Mwca,
            fuse_only_high_res: false,
            early_fusion: false,
            neck_channels: neck,
            bias: true,
            seed: 0,
        }
    }

    /// Desk-scale tiny configuration used by the synthetic benchmark.
    pub fn desk(primary: ModalityConfig, modalities: Vec<ModalityConfig>) -> Self {
        ModelConfig::preset(Variant::Custom, primary, modalities)
    }

    pub fn validate(&self) -> Result<()> {
        for s in 0..4 {
            if self.camera_channels[s] == 0
                || self.camera_heads[s] == 0
                || self.camera_channels[s] % self.camera_heads[s] != 0
            {
                return Err(Error::Config(format!(
                    "stream {} channels {} not divisible by heads {}",
                    s + 1,
                    self.camera_channels[s],
                    self.camera_heads[s]
                )));
            }
        }
        if self.secondary_heads == 0 || self.secondary_channels % self.secondary_heads != 0 {
            return Err(Error::Config(format!(
                "secondary channels {} not divisible by heads {}",
                self.secondary_channels, self.secondary_heads
            )));
        }
        if self.secondary_channels != self.camera_channels[0] {
            return Err(Error::Config(format!(
                "secondary width {} must match camera stream-1 width {}",
                self.secondary_channels, self.camera_channels[0]
            )));
        }
        if self.window == 0 || self.stage1_blocks == 0 || self.stage_blocks == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config(
                "window, block counts and ffn ratio must be >= 1".into(),
            ));
        }
        if self.primary.channels == 0 {
            return Err(Error::Config("primary modality needs at least one channel".into()));
        }
        for m in &self.modalities {
            if m.channels == 0 {
                return Err(Error::Config(format!(
                    "modality {} needs at least one channel",
                    m.name
                )));
            }
        }
        if self.early_fusion && self.fusion_variant != FusionVariant::None {
            // early fusion runs the camera branch alone on concatenated input
            return Err(Error::Config(
                "early_fusion replaces the fusion blocks; set fusion_variant = none".into(),
            ));
        }
        Ok(())
    }

    /// Whether secondary branches and fusion blocks exist at all.
    pub fn has_fusion(&self) -> bool {
        !self.early_fusion
            && self.fusion_variant != FusionVariant::None
            && !self.modalities.is_empty()
    }

    /// Camera streams fused at stage `s` (2..=4): all of them, or just the
    /// high-resolution stream.
    pub fn fused_streams(&self, stage: usize) -> usize {
        if self.fuse_only_high_res {
            1
        } else {
            stage
        }
    }

    /// Total MWCA blocks a build will instantiate (one per fused stream per
    /// level), and per-modality cross-attention units inside them.
    pub fn expected_fusion_blocks(&self) -> (usize, usize) {
        if !self.has_fusion() {
            return (0, 0);
        }
        let blocks: usize = (2..=4).map(|s| self.fused_streams(s)).sum();
        (blocks, blocks * self.modalities.len())
    }

    /// Input channels of the primary stem (early fusion concatenates all).
    pub fn stem_input_channels(&self) -> usize {
        if self.early_fusion {
            self.primary.channels + self.modalities.iter().map(|m| m.channels).sum::<usize>()
        } else {
            self.primary.channels
        }
    }
}
