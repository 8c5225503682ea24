use serde::{Deserialize, Serialize};

use crate::{Result, VlmError};

/// Reserved token ids shared by the tokenizer and the model.
pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

/// Architecture hyperparameters of the decoder-only backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    #[serde(default = "default_true")]
    pub tie_lm_head: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_ffn_mult() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    /// GPT-2 small: 12 layers, 768 hidden, 12 heads, 50257 tokens, 1024 positions.
    pub fn gpt2_small() -> Self {
        Self {
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            ffn_mult: 4,
            vocab_size: 50257,
            max_context: 1024,
            tie_lm_head: true,
            dropout: 0.1,
        }
    }

    /// Desk-scale default that trains on a laptop CPU.
    pub fn toy() -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            ffn_mult: 4,
            vocab_size: 512,
            max_context: 128,
            tie_lm_head: true,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Every violated constraint, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.d_model == 0 {
            v.push("d_model must be positive".to_string());
        }
        if self.n_heads == 0 {
            v.push("n_heads must be positive".to_string());
        } else if self.d_model % self.n_heads != 0 {
            v.push(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_mult == 0 {
            v.push("ffn_mult must be positive".to_string());
        }
        if self.vocab_size < 2 {
            v.push(format!("vocab_size {} leaves no room for PAD and EOS", self.vocab_size));
        }
        if self.max_context < 2 {
            v.push(format!("max_context {} must be at least 2", self.max_context));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            v.push(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(VlmError::Config(v))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        assert!(ModelConfig::gpt2_small().validate().is_ok());
        assert!(ModelConfig::toy().validate().is_ok());
    }

    #[test]
    fn all_violations_are_reported() {
        let cfg = ModelConfig {
            d_model: 10,
            n_heads: 3,
            vocab_size: 1,
            max_context: 1,
            ..ModelConfig::toy()
        };
        match cfg.validate() {
            Err(VlmError::Config(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
