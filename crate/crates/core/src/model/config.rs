use serde::{Deserialize, Serialize};

use crate::error::{PirtError, Result};

/// Shapes, widths and component toggles of a Pirt model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    /// Backbone output channels `C`.
    pub channels: usize,
    /// Bottleneck width of the intra-part module.
    pub irm_dim: usize,
    pub heads: usize,
    /// Transformer units per inter-part stack.
    pub units: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub margin: f64,
    pub num_classes: usize,
    pub use_pose: bool,
    pub use_intra: bool,
    pub use_inter: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_h: 64,
            image_w: 32,
            channels: 64,
            irm_dim: 32,
            heads: 4,
            units: 3,
            ffn: 512,
            dropout: 0.1,
            margin: 0.3,
            num_classes: 16,
            use_pose: true,
            use_intra: true,
            use_inter: true,
        }
    }
}

impl ModelConfig {
    /// A few-hundred-parameter model for finite-difference checks.
    pub fn micro() -> Self {
        ModelConfig {
            image_h: 16,
            image_w: 8,
            channels: 8,
            irm_dim: 4,
            heads: 2,
            units: 1,
            ffn: 12,
            dropout: 0.1,
            margin: 0.3,
            num_classes: 3,
            ..ModelConfig::default()
        }
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        (self.image_h / 4, self.image_w / 4)
    }

    pub fn patch_tokens(&self) -> usize {
        let (h, w) = self.feature_hw();
        (h / 4) * (w / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(PirtError::Config(msg));
        if self.image_h == 0 || self.image_w == 0 || self.image_h % 4 != 0 || self.image_w % 4 != 0 {
            return fail(format!("image {}×{} must have extents divisible by 4", self.image_h, self.image_w));
        }
        let (fh, fw) = self.feature_hw();
        if fh % 4 != 0 || fw % 2 != 0 {
            return fail(format!("feature grid {fh}×{fw} needs height divisible by 4 and width by 2"));
        }
        if self.channels < 4 || self.channels % 4 != 0 {
            return fail(format!("channel count {} must be a positive multiple of 4", self.channels));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return fail(format!("channel count {} is not divisible by {} heads", self.channels, self.heads));
        }
        if self.irm_dim == 0 || self.irm_dim % self.heads != 0 {
            return fail(format!("bottleneck width {} is not divisible by {} heads", self.irm_dim, self.heads));
        }
        if self.ffn == 0 {
            return fail("feed-forward width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.margin >= 0.0) {
            return fail(format!("margin {} must be non-negative", self.margin));
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::micro().validate().unwrap();
        assert_eq!(ModelConfig::default().feature_hw(), (16, 8));
        assert_eq!(ModelConfig::default().patch_tokens(), 16);
    }

    #[test]
    fn indivisible_extents_are_rejected() {
        for (h, w) in [(62, 32), (64, 30), (40, 32), (64, 36)] {
            let c = ModelConfig { image_h: h, image_w: w, ..ModelConfig::default() };
            assert!(matches!(c.validate(), Err(PirtError::Config(_))), "{h}×{w}");
        }
    }
}
