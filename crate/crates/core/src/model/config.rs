use serde::{Deserialize, Serialize};

use crate::data::{DEFAULT_SEQ_LEN, FEATURES};
use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults are the full-size model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub channels: usize,
    /// Gaussian ranges over the temporal axis.
    pub gaussians: usize,
    /// Gaussian ranges over the channel axis.
    pub channel_gaussians: usize,
    pub temporal_layers: usize,
    pub channel_layers: usize,
    pub temporal_heads: usize,
    pub channel_heads: usize,
    pub d_model: usize,
    pub msc_kernels: Vec<usize>,
    pub msc_dropout: f64,
    pub head_kernels: Vec<usize>,
    pub head_dropout: f64,
    pub embedding_size: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            seq_len: DEFAULT_SEQ_LEN,
            channels: FEATURES,
            gaussians: 20,
            channel_gaussians: 20,
            temporal_layers: 10,
            channel_layers: 1,
            temporal_heads: 10,
            channel_heads: 5,
            d_model: 50,
            msc_kernels: vec![1, 3, 5],
            msc_dropout: 0.1,
            head_kernels: vec![128, 32],
            head_dropout: 0.5,
            embedding_size: 64,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            seq_len: 8,
            channels: FEATURES,
            gaussians: 3,
            channel_gaussians: 3,
            temporal_layers: 1,
            channel_layers: 1,
            temporal_heads: 2,
            channel_heads: 1,
            d_model: 8,
            embedding_size: 4,
            ..Self::default()
        }
    }

    /// Reduced model for desk-scale training runs.
    pub fn desk() -> Self {
        ModelConfig {
            gaussians: 5,
            channel_gaussians: 5,
            temporal_layers: 2,
            channel_layers: 1,
            d_model: 20,
            embedding_size: 16,
            // At this size the full-model 0.5 keeps the softmax head saturated.
            head_dropout: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("seq_len", self.seq_len),
            ("channels", self.channels),
            ("gaussians", self.gaussians),
            ("channel_gaussians", self.channel_gaussians),
            ("temporal_heads", self.temporal_heads),
            ("channel_heads", self.channel_heads),
            ("d_model", self.d_model),
            ("embedding_size", self.embedding_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, heads) in [("temporal_heads", self.temporal_heads), ("channel_heads", self.channel_heads)] {
            if self.d_model % heads != 0 {
                return Err(Error::Config(format!(
                    "d_model {} is not divisible by {name} {heads}",
                    self.d_model
                )));
            }
        }
        for (name, p) in [("msc_dropout", self.msc_dropout), ("head_dropout", self.head_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if self.msc_kernels.is_empty() {
            return Err(Error::Config("msc_kernels must not be empty".into()));
        }
        if self.msc_kernels.iter().chain(&self.head_kernels).any(|&k| k == 0) {
            return Err(Error::Config("kernel sizes must be at least 1".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }
}
