use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

/// Architecture of a LLaMA-style decoder-only transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Key/value heads for grouped-query attention.
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// TinyLlama-1.1B architecture constants.
    pub fn tinyllama() -> Self {
        ModelConfig {
            n_layers: 22,
            d_model: 2048,
            n_heads: 32,
            n_kv_heads: 4,
            d_ff: 5632,
            vocab_size: 32_000,
            max_seq_len: 2048,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    /// Small byte-level model used by the tests and the bundled configs.
    pub fn toy(n_layers: usize) -> Self {
        ModelConfig {
            n_layers,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 4,
            d_ff: 128,
            vocab_size: crate::data::BYTE_VOCAB_SIZE,
            max_seq_len: 256,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads {} is not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary embeddings",
                self.d_head()
            )));
        }
        if !(self.norm_eps >= 0.0 && self.rope_base > 0.0) {
            return Err(Error::Config("norm_eps must be >= 0 and rope_base > 0".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Width of the key and value projections.
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head()
    }

    /// Parameters of one query plus one key projection.
    pub fn qk_params_per_layer(&self) -> usize {
        self.d_model * self.d_model + self.d_model * self.kv_dim()
    }

    /// Parameter count of the dense model (no sharing).
    pub fn dense_parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = self.qk_params_per_layer() + d * self.kv_dim() + d * d + 3 * d * self.d_ff + 2 * d;
        2 * self.vocab_size * d + self.n_layers * per_layer + d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tinyllama_matches_published_size() {
        let c = ModelConfig::tinyllama();
        c.validate().unwrap();
        assert_eq!(c.d_head(), 64);
        assert_eq!(c.kv_dim(), 256);
        // 1,100,048,384 parameters in the released checkpoint.
        assert_eq!(c.dense_parameter_count(), 1_100_048_384);
    }

    #[test]
    fn validation_rejects_bad_divisibility() {
        let mut c = ModelConfig::toy(2);
        c.validate().unwrap();
        c.n_kv_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(2);
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(2);
        c.n_layers = 0;
        assert!(c.validate().is_err());
    }
}
