//! Bit-exact manipulation of cached IEEE-754 words.
//!
//! Bit indices count from the least significant bit of the stored word
//! (bit 0 = LSB), for both fp16 and fp32 caches.

use serde::{Deserialize, Serialize};

use crate::config::{CacheDtype, ModelConfig};
use crate::error::{Error, Result};
use crate::kv_cache::{CacheTensor, KvCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Clear-or-set the bit (`word ^ (1 << b)`).
    Xor,
    /// Force the bit to 1 (`word | (1 << b)`); a no-op if already set.
    #[default]
    SetToOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenPos {
    /// Resolved at injection time to `filled_len - 1`.
    LastPrefix,
    Index(usize),
}

impl TokenPos {
    pub fn resolve(self, filled_len: usize) -> Option<usize> {
        match self {
            TokenPos::LastPrefix => filled_len.checked_sub(1),
            TokenPos::Index(t) if t < filled_len => Some(t),
            TokenPos::Index(_) => None,
        }
    }
}

/// A single-bit target inside the value cache. Field order defines the
/// canonical ordering used for tie-breaks: (layer, head, channel, bit, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BitCoordinate {
    pub layer: usize,
    pub kv_head: usize,
    pub channel: usize,
    pub bit: u32,
    pub token_pos: TokenPos,
    pub mode: InjectionMode,
}

impl BitCoordinate {
    pub fn check_bounds(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers || self.kv_head >= cfg.n_kv_heads || self.channel >= cfg.head_dim {
            return Err(Error::Injection(format!(
                "coordinate (layer {}, head {}, channel {}) outside model bounds",
                self.layer, self.kv_head, self.channel
            )));
        }
        if self.bit >= cfg.cache_dtype.width_bits() {
            return Err(Error::Injection(format!(
                "bit {} outside {}-bit word",
                self.bit,
                cfg.cache_dtype.width_bits()
            )));
        }
        if let TokenPos::Index(t) = self.token_pos {
            if t >= cfg.max_seq {
                return Err(Error::Injection(format!("token {t} beyond max_seq {}", cfg.max_seq)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    ZeroToOne,
    OneToZero,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultReceipt {
    pub coordinate: BitCoordinate,
    pub resolved_token: usize,
    pub word_offset: usize,
    pub old_word: u32,
    pub new_word: u32,
    pub changed: bool,
    pub transition: Transition,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitPolicy {
    pub bits: Vec<u32>,
    #[serde(default = "default_true")]
    pub finite_guard: bool,
}

fn default_true() -> bool {
    true
}

impl BitPolicy {
    /// Exponent bits, most significant first, with the finite guard on.
    pub fn exponent(dtype: CacheDtype) -> Self {
        Self {
            bits: dtype.exponent_bits(),
            finite_guard: true,
        }
    }

    pub fn validate(&self, dtype: CacheDtype) -> Result<()> {
        if self.bits.is_empty() {
            return Err(Error::Config("bit policy is empty".into()));
        }
        if let Some(b) = self.bits.iter().find(|b| **b >= dtype.width_bits()) {
            return Err(Error::Config(format!(
                "bit policy index {b} outside {}-bit word",
                dtype.width_bits()
            )));
        }
        Ok(())
    }
}

fn check_width(b: u32, width: u32) -> Result<()> {
    if b >= width {
        return Err(Error::Input(format!("bit index {b} outside {width}-bit word")));
    }
    Ok(())
}

pub fn flip_bit(word: u32, b: u32, mode: InjectionMode, dtype: CacheDtype) -> Result<u32> {
    check_width(b, dtype.width_bits())?;
    Ok(match mode {
        InjectionMode::Xor => word ^ (1 << b),
        InjectionMode::SetToOne => word | (1 << b),
    })
}

pub fn read_bit(word: u32, b: u32, dtype: CacheDtype) -> Result<u32> {
    check_width(b, dtype.width_bits())?;
    Ok((word >> b) & 1)
}

/// Policy bits that are currently 0 in `word`, in policy order. With the
/// finite guard on, bits whose setting would produce ±∞ or NaN are dropped.
pub fn candidate_bits(word: u32, policy: &BitPolicy, dtype: CacheDtype) -> Vec<u32> {
    policy
        .bits
        .iter()
        .copied()
        .filter(|&b| b < dtype.width_bits() && (word >> b) & 1 == 0)
        .filter(|&b| !policy.finite_guard || dtype.decode(word | (1 << b)).is_finite())
        .collect()
}

/// Mutates exactly one value-cache word. The returned receipt restores it
/// via [`revert_fault`].
pub fn apply_fault(cache: &mut KvCache, coord: &BitCoordinate) -> Result<FaultReceipt> {
    let layout = cache.layout().clone();
    if coord.bit >= layout.dtype.width_bits() {
        return Err(Error::Injection(format!(
            "bit {} outside {}-bit word",
            coord.bit,
            layout.dtype.width_bits()
        )));
    }
    let token = coord.token_pos.resolve(cache.filled_len()).ok_or_else(|| {
        Error::Injection(format!(
            "token position {:?} not cached (filled_len {})",
            coord.token_pos,
            cache.filled_len()
        ))
    })?;
    let offset = layout
        .word_offset(coord.layer, CacheTensor::V, coord.kv_head, token, coord.channel)
        .map_err(|e| Error::Injection(e.to_string()))?;
    let old_word = cache.read_word_at(offset);
    let new_word = flip_bit(old_word, coord.bit, coord.mode, layout.dtype)?;
    let old_bit = (old_word >> coord.bit) & 1;
    let new_bit = (new_word >> coord.bit) & 1;
    let transition = match (old_bit, new_bit) {
        (0, 1) => Transition::ZeroToOne,
        (1, 0) => Transition::OneToZero,
        _ => Transition::None,
    };
    cache.write_word_at(offset, new_word);
    Ok(FaultReceipt {
        coordinate: *coord,
        resolved_token: token,
        word_offset: offset,
        old_word,
        new_word,
        changed: old_word != new_word,
        transition,
    })
}

pub fn revert_fault(cache: &mut KvCache, receipt: &FaultReceipt) {
    cache.write_word_at(receipt.word_offset, receipt.old_word);
}
