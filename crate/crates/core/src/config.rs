use alloc::format;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

/// Architecture hyperparameters of a decoder-only language model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layernorm_eps: f32,
    /// Share the token embedding with the output projection.
    #[serde(default = "default_tied")]
    pub tied_head: bool,
}

fn default_tied() -> bool {
    true
}

impl Default for ModelConfig {
    /// The GPT-2-shaped desk-scale miniature.
    fn default() -> Self {
        Self {
            num_layers: 12,
            hidden_dim: 128,
            num_heads: 4,
            ffn_dim: 512,
            vocab_size: 258,
            max_seq_len: 64,
            layernorm_eps: 1e-5,
            tied_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.hidden_dim == 0
            || self.num_heads == 0
            || self.ffn_dim == 0
        {
            return Err(input("model dimensions must be positive"));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(input(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(input("max_seq_len must be at least 1"));
        }
        if self.vocab_size < 2 {
            return Err(input("vocab_size must be at least 2"));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(input("layernorm_eps must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Learning-rate schedule shape. Only cosine decay is supported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

/// Optimizer and loop settings shared by every training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    /// Sequences are truncated to `min(max_seq_len, model.max_seq_len)`.
    pub max_seq_len: usize,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.01,
            batch_size: 4,
            epochs: 5,
            warmup_ratio: 0.1,
            schedule: Schedule::Cosine,
            max_seq_len: 512,
            seed: 42,
            grad_clip_norm: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(input("learning_rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(input("warmup_ratio must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(input("batch_size must be positive"));
        }
        if self.max_seq_len < 2 {
            return Err(input("max_seq_len must be at least 2"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(input("grad_clip_norm must be positive"));
            }
        }
        Ok(())
    }

    /// The same settings with a different epoch count.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn train_defaults_follow_recipe() {
        let t = TrainConfig::default();
        assert_eq!(t.learning_rate, 1e-4);
        assert_eq!(t.weight_decay, 0.01);
        assert_eq!(t.epochs, 5);
        assert_eq!(t.warmup_ratio, 0.1);
        assert_eq!(t.seed, 42);
        assert!(t.validate().is_ok());
        let bad = TrainConfig {
            warmup_ratio: 1.5,
            ..t
        };
        assert!(bad.validate().is_err());
    }
}
