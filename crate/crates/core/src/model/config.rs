use serde::{Deserialize, Serialize};

use crate::corpus::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::relate::Branches;

/// Detector shape and context settings. Every field has a default, so a
/// config file only names what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    /// 1-based decoder layers that receive relation weights; `None` means the top three.
    pub context_layers: Option<Vec<usize>>,
    pub context_hidden: usize,
    pub branches: Branches,
    /// Keypoint confidence gate.
    pub theta: f64,
    pub ffn_hidden: usize,
    pub stem_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_encoder_layers: 2,
            n_decoder_layers: 6,
            num_queries: 12,
            num_classes: NUM_CLASSES,
            context_layers: None,
            context_hidden: 16,
            branches: Branches::ALL,
            theta: 0.3,
            ffn_hidden: 128,
            stem_channels: 16,
            image_height: 64,
            image_width: 64,
        }
    }
}

impl ModelConfig {
    /// Resolved context layer list, ascending.
    pub fn context_layers(&self) -> Vec<usize> {
        match &self.context_layers {
            Some(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
            None => (self.n_decoder_layers.saturating_sub(2).max(2)..=self.n_decoder_layers).collect(),
        }
    }

    pub fn is_context_layer(&self, layer: usize) -> bool {
        self.context_layers().contains(&layer)
    }

    /// Token grid after the two stride-2 stem convolutions.
    pub fn grid(&self) -> (usize, usize) {
        let down = |n: usize| n.div_ceil(2).div_ceil(2);
        (down(self.image_height), down(self.image_width))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(4) {
            return bad(format!("d_model ({}) must be divisible by 4", self.d_model));
        }
        if self.n_decoder_layers == 0 || self.num_queries == 0 || self.num_classes == 0 {
            return bad("n_decoder_layers, num_queries and num_classes must be positive".into());
        }
        if self.context_hidden == 0 || self.ffn_hidden == 0 || self.stem_channels == 0 {
            return bad("context_hidden, ffn_hidden and stem_channels must be positive".into());
        }
        if self.image_height < 4 || self.image_width < 4 {
            return bad("image must be at least 4x4".into());
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("theta {} outside [0, 1]", self.theta));
        }
        for &l in &self.context_layers() {
            if l < 2 || l > self.n_decoder_layers {
                return bad(format!(
                    "context layer {l} outside 2..={} (layer 1 has no preceding predictions)",
                    self.n_decoder_layers
                ));
            }
        }
        Ok(())
    }
}
