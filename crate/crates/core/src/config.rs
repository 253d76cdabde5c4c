use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Storage format of cached key/value words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheDtype {
    Fp32,
    Fp16,
}

impl CacheDtype {
    pub fn width_bits(self) -> u32 {
        match self {
            CacheDtype::Fp32 => 32,
            CacheDtype::Fp16 => 16,
        }
    }

    pub fn element_size(self) -> usize {
        (self.width_bits() / 8) as usize
    }

    pub fn to_byte(self) -> u8 {
        match self {
            CacheDtype::Fp32 => 0,
            CacheDtype::Fp16 => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(CacheDtype::Fp32),
            1 => Some(CacheDtype::Fp16),
            _ => None,
        }
    }

    /// Rounds `value` to the stored representation and returns the raw word.
    pub fn encode(self, value: f32) -> u32 {
        match self {
            CacheDtype::Fp32 => value.to_bits(),
            CacheDtype::Fp16 => half::f16::from_f32(value).to_bits() as u32,
        }
    }

    pub fn decode(self, word: u32) -> f32 {
        match self {
            CacheDtype::Fp32 => f32::from_bits(word),
            CacheDtype::Fp16 => half::f16::from_bits(word as u16).to_f32(),
        }
    }

    /// Exponent bit indices, most significant first.
    pub fn exponent_bits(self) -> Vec<u32> {
        match self {
            CacheDtype::Fp32 => (23..=30).rev().collect(),
            CacheDtype::Fp16 => (10..=14).rev().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosScheme {
    None,
    Rotary,
}

impl PosScheme {
    pub fn to_byte(self) -> u8 {
        match self {
            PosScheme::None => 0,
            PosScheme::Rotary => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(PosScheme::None),
            1 => Some(PosScheme::Rotary),
            _ => None,
        }
    }
}

fn default_norm_eps() -> f32 {
    1e-5
}

fn default_pos_scheme() -> PosScheme {
    PosScheme::Rotary
}

/// Architecture of a decoder-only model. `n_kv_heads` must divide `n_heads`
/// and `d_model == n_heads * head_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub cache_dtype: CacheDtype,
    #[serde(default = "default_pos_scheme")]
    pub pos_scheme: PosScheme,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f32,
}

impl ModelConfig {
    /// The two-layer toy used throughout the tests: 2 query heads, 2 KV heads,
    /// head dim 4, vocabulary 16.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 2,
            d_model: 8,
            head_dim: 4,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq: 16,
            cache_dtype: CacheDtype::Fp16,
            pos_scheme: PosScheme::Rotary,
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_model", self.d_model),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.max_seq < 2 {
            return Err(Error::Config("max_seq must be at least 2".into()));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_kv_heads {} does not divide n_heads {}",
                self.n_kv_heads, self.n_heads
            )));
        }
        if self.d_model != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * head_dim {}",
                self.d_model, self.n_heads, self.head_dim
            )));
        }
        if self.pos_scheme == PosScheme::Rotary && !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config("rotary embeddings need an even head_dim".into()));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be a positive finite number".into()));
        }
        Ok(())
    }

    /// Width of the key/value projections (`n_kv_heads * head_dim`).
    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}
