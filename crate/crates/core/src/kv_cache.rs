//! Contiguous, bit-addressable key/value cache.
//!
//! All layers share one byte arena. Layer `l` stores K then V, each laid out
//! `[kv_head][token][channel]` row-major with `max_seq` token slots, so
//!
//! ```text
//! word(l, V, h, t, j) = base_offset(l, V) + (h * max_seq + t) * head_dim + j
//! ```
//!
//! [`CacheLayout`] owns that formula; the fault model reuses it.

use serde::{Deserialize, Serialize};

use crate::config::{CacheDtype, ModelConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheTensor {
    K,
    V,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLayout {
    pub n_layers: usize,
    pub n_kv_heads: usize,
    pub max_seq: usize,
    pub head_dim: usize,
    pub dtype: CacheDtype,
}

impl CacheLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            n_kv_heads: cfg.n_kv_heads,
            max_seq: cfg.max_seq,
            head_dim: cfg.head_dim,
            dtype: cfg.cache_dtype,
        }
    }

    pub fn words_per_tensor(&self) -> usize {
        self.n_kv_heads * self.max_seq * self.head_dim
    }

    pub fn total_words(&self) -> usize {
        2 * self.n_layers * self.words_per_tensor()
    }

    /// Linear word offset of the first word of `(layer, tensor)` in the arena.
    pub fn base_offset(&self, layer: usize, tensor: CacheTensor) -> usize {
        let slot = 2 * layer + matches!(tensor, CacheTensor::V) as usize;
        slot * self.words_per_tensor()
    }

    pub fn word_offset(
        &self,
        layer: usize,
        tensor: CacheTensor,
        head: usize,
        token: usize,
        channel: usize,
    ) -> Result<usize> {
        if layer >= self.n_layers
            || head >= self.n_kv_heads
            || token >= self.max_seq
            || channel >= self.head_dim
        {
            return Err(Error::Address(format!(
                "(layer {layer}, head {head}, token {token}, channel {channel}) outside \
                 ({}, {}, {}, {})",
                self.n_layers, self.n_kv_heads, self.max_seq, self.head_dim
            )));
        }
        Ok(self.base_offset(layer, tensor) + (head * self.max_seq + token) * self.head_dim + channel)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvCache {
    layout: CacheLayout,
    arena: Vec<u8>,
    filled_len: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        let layout = CacheLayout::new(cfg);
        let bytes = layout.total_words() * layout.dtype.element_size();
        Self {
            layout,
            arena: vec![0u8; bytes],
            filled_len: 0,
        }
    }

    pub fn layout(&self) -> &CacheLayout {
        &self.layout
    }

    pub fn dtype(&self) -> CacheDtype {
        self.layout.dtype
    }

    pub fn filled_len(&self) -> usize {
        self.filled_len
    }

    pub(crate) fn set_filled_len(&mut self, len: usize) {
        debug_assert!(len <= self.layout.max_seq);
        self.filled_len = len;
    }

    /// Raw arena bytes, little-endian words.
    pub fn as_bytes(&self) -> &[u8] {
        &self.arena
    }

    pub fn read_word_at(&self, offset: usize) -> u32 {
        let size = self.layout.dtype.element_size();
        let at = offset * size;
        match size {
            2 => u16::from_le_bytes([self.arena[at], self.arena[at + 1]]) as u32,
            _ => u32::from_le_bytes([
                self.arena[at],
                self.arena[at + 1],
                self.arena[at + 2],
                self.arena[at + 3],
            ]),
        }
    }

    pub fn write_word_at(&mut self, offset: usize, word: u32) {
        let size = self.layout.dtype.element_size();
        let at = offset * size;
        match size {
            2 => self.arena[at..at + 2].copy_from_slice(&(word as u16).to_le_bytes()),
            _ => self.arena[at..at + 4].copy_from_slice(&word.to_le_bytes()),
        }
    }

    pub fn read_word(
        &self,
        layer: usize,
        tensor: CacheTensor,
        head: usize,
        token: usize,
        channel: usize,
    ) -> Result<u32> {
        let off = self.layout.word_offset(layer, tensor, head, token, channel)?;
        Ok(self.read_word_at(off))
    }

    /// Decoded value of a cached entry.
    pub fn read_value(
        &self,
        layer: usize,
        tensor: CacheTensor,
        head: usize,
        token: usize,
        channel: usize,
    ) -> Result<f32> {
        Ok(self.dtype().decode(self.read_word(layer, tensor, head, token, channel)?))
    }

    /// Rounds `values` (one head's `head_dim` channels) into the cache.
    pub(crate) fn store_head(
        &mut self,
        layer: usize,
        tensor: CacheTensor,
        head: usize,
        token: usize,
        values: &[f32],
    ) {
        let start = self.layout.base_offset(layer, tensor)
            + (head * self.layout.max_seq + token) * self.layout.head_dim;
        let dtype = self.layout.dtype;
        for (j, v) in values.iter().enumerate() {
            self.write_word_at(start + j, dtype.encode(*v));
        }
    }

    /// Decodes one head's channels at `token` into `out`.
    pub(crate) fn load_head(
        &self,
        layer: usize,
        tensor: CacheTensor,
        head: usize,
        token: usize,
        out: &mut [f32],
    ) {
        let start = self.layout.base_offset(layer, tensor)
            + (head * self.layout.max_seq + token) * self.layout.head_dim;
        let dtype = self.layout.dtype;
        for (j, o) in out.iter_mut().enumerate() {
            *o = dtype.decode(self.read_word_at(start + j));
        }
    }
}
