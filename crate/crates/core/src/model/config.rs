use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Beginning-of-sequence token id; bytes occupy ids `0..256`.
pub const BOS: usize = 256;
/// End-of-sequence token id.
pub const EOS: usize = 257;
/// Padding token id. Sequences are never padded during training or
/// evaluation, but the id is reserved in the vocabulary.
pub const PAD: usize = 258;
/// 256 bytes plus the three specials.
pub const VOCAB_SIZE: usize = 259;

/// Shape hyperparameters of the byte-level decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 64,
        }
    }
}

impl ModelConfig {
    /// A narrower model for quick examples and tests.
    pub fn toy() -> Self {
        Self {
            d_model: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != VOCAB_SIZE {
            return Err(Error::contract(format!(
                "vocab_size must be {VOCAB_SIZE} (bytes + BOS + EOS + PAD), got {}",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::contract("d_model, n_heads and n_layers must be positive"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::contract("max_seq_len must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of named layers: embedding, one per block, output head.
    pub fn layer_count(&self) -> usize {
        self.n_layers + 2
    }

    /// Closed-form parameter count of the architecture.
    pub fn parameter_count(&self) -> usize {
        let (v, d, s) = (self.vocab_size, self.d_model, self.max_seq_len);
        let embed = v * d + s * d;
        // q, k, v, out projections + mlp (d -> 4d -> d) with biases
        let block = 4 * d * d + d * 4 * d + 4 * d + 4 * d * d + d;
        let head = d * v + v;
        embed + self.n_layers * block + head
    }
}

/// `BOS` followed by the prompt bytes.
pub fn encode_prompt(prompt: &[u8]) -> Vec<usize> {
    std::iter::once(BOS)
        .chain(prompt.iter().map(|&b| b as usize))
        .collect()
}

/// Answer bytes followed by `EOS`.
pub fn encode_answer(answer: &[u8]) -> Vec<usize> {
    answer
        .iter()
        .map(|&b| b as usize)
        .chain(std::iter::once(EOS))
        .collect()
}

/// Bytes of a generated sequence, truncated at the first `EOS`; other
/// special tokens are dropped.
pub fn decode_until_eos(tokens: &[usize]) -> Vec<u8> {
    tokens
        .iter()
        .take_while(|&&t| t != EOS)
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn rejects_bad_head_split() {
        let cfg = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            max_seq_len: 1,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn token_round_trip() {
        let p = encode_prompt(b"ab");
        assert_eq!(p, vec![BOS, 97, 98]);
        let a = encode_answer(b"odd");
        assert_eq!(decode_until_eos(&a), b"odd");
        assert_eq!(decode_until_eos(&[104, EOS, 105]), b"h");
    }
}
