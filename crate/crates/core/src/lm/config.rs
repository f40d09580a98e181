use serde::{Deserialize, Serialize};

use crate::error::{CkfError, Result};

/// Backbone and adapter dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    #[serde(rename = "L")]
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_llm: usize,
    /// 0 means 4·d_llm.
    pub d_ff: usize,
    /// Filled from the corpus vocabulary when 0.
    pub vocab: usize,
    pub max_len: usize,
    #[serde(rename = "rank")]
    pub rank: usize,
    /// Std of the frozen backbone weights (token table excluded).
    pub init_std: f64,
    /// Token-table std; 0 means 1/sqrt(d_llm). Positions use a tenth of it.
    pub emb_std: f64,
    /// Std of the adapter A matrices (B starts at zero).
    pub lora_init_std: f64,
    pub train_token_table: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            d_llm: 32,
            d_ff: 0,
            vocab: 0,
            max_len: 192,
            rank: 16,
            init_std: 0.0,
            emb_std: 0.0,
            lora_init_std: 0.0,
            train_token_table: false,
        }
    }
}

impl LmConfig {
    pub fn d_ff(&self) -> usize {
        if self.d_ff == 0 {
            4 * self.d_llm
        } else {
            self.d_ff
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_llm / self.n_heads
    }

    /// Backbone weight std; 0 means 1/sqrt(d_llm).
    pub fn weight_std(&self) -> f64 {
        if self.init_std > 0.0 {
            self.init_std
        } else {
            1.0 / (self.d_llm as f64).sqrt()
        }
    }

    pub fn emb_std(&self) -> f64 {
        if self.emb_std > 0.0 {
            self.emb_std
        } else {
            1.0 / (self.d_llm as f64).sqrt()
        }
    }

    /// Adapter A std; 0 means 1/sqrt(d_llm).
    pub fn lora_std(&self) -> f64 {
        if self.lora_init_std > 0.0 {
            self.lora_init_std
        } else {
            1.0 / (self.d_llm as f64).sqrt()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(CkfError::config("lm.L", "must be at least 1"));
        }
        if self.n_heads == 0 || self.d_llm == 0 || !self.d_llm.is_multiple_of(self.n_heads) {
            return Err(CkfError::config(
                "lm.d_llm",
                format!("{} is not divisible by n_heads={}", self.d_llm, self.n_heads),
            ));
        }
        if self.rank < 1 {
            return Err(CkfError::config("lm.rank", "must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(CkfError::config("lm.max_len", "must be positive"));
        }
        Ok(())
    }
}
