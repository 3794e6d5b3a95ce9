use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Swin,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub arch: Arch,
    pub feature_size: usize,
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    pub window: usize,
    pub patch: usize,
    pub in_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            arch: Arch::Swin,
            feature_size: 48,
            depths: [2, 2, 2, 2],
            heads: [3, 6, 12, 24],
            window: 7,
            patch: 2,
            in_channels: 1,
        }
    }
}

/// Total downsampling factor of every encoder.
pub const ENCODER_STRIDE: usize = 32;
pub const PYRAMID_LEVELS: usize = 5;

impl EncoderConfig {
    pub fn with_feature_size(feature_size: usize) -> Self {
        EncoderConfig { feature_size, ..Default::default() }
    }

    pub fn bottleneck_channels(&self) -> usize {
        16 * self.feature_size
    }

    /// Channels of pyramid level `k` (stride `2^(k+1)`).
    pub fn level_channels(&self, k: usize) -> usize {
        self.feature_size << k
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.feature_size;
        if c == 0 {
            return Err(ModelError::Config("feature_size must be positive".into()));
        }
        if c % 2 != 0 {
            return Err(ModelError::Config(format!("feature_size {c} must be even")));
        }
        if self.in_channels == 0 {
            return Err(ModelError::Config("in_channels must be positive".into()));
        }
        if self.patch != 2 {
            return Err(ModelError::Config(format!("patch {} unsupported; the stride schedule needs 2", self.patch)));
        }
        if self.arch == Arch::Swin {
            if self.window == 0 {
                return Err(ModelError::Config("window must be positive".into()));
            }
            if self.depths.contains(&0) {
                return Err(ModelError::Config(format!("depths {:?} must be positive", self.depths)));
            }
            if self.heads.contains(&0) {
                return Err(ModelError::Config(format!("heads {:?} must be positive", self.heads)));
            }
            for (i, &h) in self.heads.iter().enumerate() {
                if (c << i) % h != 0 {
                    return Err(ModelError::Config(format!("stage {i} width {} not divisible by {h} heads", c << i)));
                }
            }
        }
        Ok(())
    }

    /// Checks a `[B, C, D, H, W]` input shape against the config.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return Err(ModelError::Shape(format!("expected [B, C, D, H, W], got {shape:?}")));
        }
        if shape[1] != self.in_channels {
            return Err(ModelError::Config(format!(
                "input has {} channels, encoder expects {}",
                shape[1], self.in_channels
            )));
        }
        for (axis, &d) in shape[2..].iter().enumerate() {
            if d == 0 || d % ENCODER_STRIDE != 0 {
                return Err(ModelError::Shape(format!(
                    "spatial axis {axis} has size {d}, which is not divisible by {ENCODER_STRIDE}"
                )));
            }
        }
        Ok(())
    }
}
