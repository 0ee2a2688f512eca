use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the toy multimodal decoder.
///
/// `layers` counts transformer blocks; activation traces therefore hold
/// `layers + 1` entries, with entry 0 being the embedded input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub visual_dim: usize,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            vocab: 64,
            max_seq: 16,
            visual_dim: 16,
            d_ff: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 8 {
            return Err(Error::contract(format!("vocab {} < 8", self.vocab)));
        }
        if self.layers < 2 {
            return Err(Error::contract(format!("layers {} < 2", self.layers)));
        }
        if self.max_seq == 0 || self.visual_dim == 0 || self.d_ff == 0 {
            return Err(Error::contract("zero-sized dimension in model config"));
        }
        Ok(())
    }
}

/// Fixed token map shared by every model and task.
pub mod vocab {
    /// Digits `0..=9` map to token ids `0..=9`.
    pub const DIGITS: usize = 10;
    /// End-of-answer.
    pub const EOA: usize = 10;
    pub const SUM: usize = 11;
    pub const MAX: usize = 12;
    pub const EQ: usize = 13;
    /// Smallest vocabulary that can express the synthetic task.
    pub const TASK_VOCAB: usize = 14;

    pub fn digit(d: usize) -> usize {
        debug_assert!(d < DIGITS);
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_heads_and_vocab() {
        let c = ModelConfig {
            heads: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            vocab: 7,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            layers: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
