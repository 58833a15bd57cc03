//! Toy pre-norm GQA transformer: RoPE, RMSNorm, SwiGLU FFN, untied output
//! head. Supports full-sequence forward, cached prefill, single-token decode,
//! and supervised training on the synthetic tasks from the harness.

mod checkpoint;
mod forward;
mod train;
mod weights;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    argmax, decode_step, forward_full, prefill, step_with_cache, Capture, DecodeOutput,
    ForwardTrace,
};
pub(crate) use forward::NORM_EPS;
pub use train::{loss_and_grads, train_teacher, Adam, TrainHyper};
pub use weights::{init_weights, LayerWeights, Weights};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = u32;

/// Number of reserved special token ids at the top of the vocabulary.
pub const RESERVED_TOKENS: usize = 6;

/// Hyperparameters of the toy teacher.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// L: transformer layers.
    pub layers: usize,
    /// H_Q: query heads.
    pub query_heads: usize,
    /// H: key/value heads.
    pub kv_heads: usize,
    /// D: per-head dimension.
    pub head_dim: usize,
    /// D_h: residual-stream width.
    pub hidden_dim: usize,
    /// D_int: SwiGLU intermediate width.
    pub ffn_dim: usize,
    /// V: vocabulary size, including the reserved specials.
    pub vocab: usize,
    /// T_max.
    pub max_seq_len: usize,
    /// RoPE base.
    pub theta_base: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale configuration: the smallest shape that exercises
    /// GQA grouping and multi-layer scoring.
    pub fn toy(seed: u64) -> Self {
        Self {
            layers: 2,
            query_heads: 4,
            kv_heads: 2,
            head_dim: 16,
            hidden_dim: 64,
            ffn_dim: 128,
            vocab: 64,
            max_seq_len: 512,
            theta_base: 10_000.0,
            seed,
        }
    }

    /// Tiny configuration for finite-difference checks of the full loss.
    pub fn tiny(seed: u64) -> Self {
        Self {
            layers: 2,
            query_heads: 2,
            kv_heads: 1,
            head_dim: 4,
            hidden_dim: 8,
            ffn_dim: 16,
            vocab: 12,
            max_seq_len: 32,
            theta_base: 10_000.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kv_heads == 0 || self.query_heads % self.kv_heads != 0 {
            return Err(Error::Validation(format!(
                "query_heads {} must be a multiple of kv_heads {}",
                self.query_heads, self.kv_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Validation("head_dim must be even for RoPE".into()));
        }
        if self.vocab <= RESERVED_TOKENS {
            return Err(Error::Validation(format!(
                "vocab {} leaves no room for {} reserved tokens",
                self.vocab, RESERVED_TOKENS
            )));
        }
        if self.layers == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return Err(Error::Validation("zero-sized model dimension".into()));
        }
        Ok(())
    }

    /// GQA group size G = H_Q / H.
    pub fn group_size(&self) -> usize {
        self.query_heads / self.kv_heads
    }

    /// KV head serving a given query head.
    pub fn kv_head_of(&self, query_head: usize) -> usize {
        query_head / self.group_size()
    }

    /// Size of the data alphabet; ids `0..data_alphabet()` are plain tokens.
    pub fn data_alphabet(&self) -> usize {
        self.vocab - RESERVED_TOKENS
    }

    pub fn bos(&self) -> Token {
        (self.vocab - RESERVED_TOKENS) as Token
    }

    pub fn repeat_token(&self) -> Token {
        (self.vocab - RESERVED_TOKENS + 1) as Token
    }

    pub fn query_token(&self) -> Token {
        (self.vocab - RESERVED_TOKENS + 2) as Token
    }

    pub fn answer_token(&self) -> Token {
        (self.vocab - RESERVED_TOKENS + 3) as Token
    }

    pub fn pad_token(&self) -> Token {
        (self.vocab - RESERVED_TOKENS + 4) as Token
    }

    pub fn is_reserved(&self, tok: Token) -> bool {
        (tok as usize) >= self.data_alphabet()
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.head_dim;
        let dh = self.hidden_dim;
        let di = self.ffn_dim;
        let per_layer = dh * (self.query_heads * d) // W_Q
            + 2 * dh * (self.kv_heads * d)          // W_K, W_V
            + (self.query_heads * d) * dh           // W_O
            + 2 * dh * di                           // gate, up
            + di * dh                               // down
            + 2 * dh; // two norms
        self.layers * per_layer + self.vocab * dh + dh + dh * self.vocab
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_valid() {
        let c = ModelConfig::toy(0);
        c.validate().unwrap();
        assert_eq!(c.group_size(), 2);
        assert_eq!(c.data_alphabet(), 58);
        assert_eq!(c.bos(), 58);
        assert_eq!(c.repeat_token(), 59);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = ModelConfig::toy(0);
        c.query_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(0);
        c.head_dim = 7;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(0);
        c.vocab = 6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn kv_head_mapping() {
        let c = ModelConfig::toy(0);
        assert_eq!(c.kv_head_of(0), 0);
        assert_eq!(c.kv_head_of(1), 0);
        assert_eq!(c.kv_head_of(2), 1);
        assert_eq!(c.kv_head_of(3), 1);
    }
}
