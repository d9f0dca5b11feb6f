// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Shape of a pre-LN decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// The default toy model: 4 layers, 128 wide, 4 heads of 32.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_head: 32,
            d_mlp: 512,
            vocab_size,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_layers,
            self.d_model,
            self.n_heads,
            self.d_head,
            self.d_mlp,
            self.vocab_size,
            self.max_seq_len,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidInput(format!("model config has a zero dimension: {self:?}")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::InvalidInput(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_consistent() {
        let c = ModelConfig::toy(100);
        c.validate().unwrap();
        assert_eq!(c.d_mlp, 4 * c.d_model);
        assert_eq!(c.n_heads * c.d_head, c.d_model);
    }

    #[test]
    fn head_mismatch_rejected() {
        let mut c = ModelConfig::toy(100);
        c.d_head = 31;
        assert!(c.validate().is_err());
    }
}
