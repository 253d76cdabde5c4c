use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::bitflip::{candidate_bits, BitCoordinate, BitPolicy, InjectionMode, TokenPos};
use crate::data::Prompt;
use crate::engine::prefill;
use crate::error::{Error, Result};
use crate::kv_cache::{CacheTensor, KvCache};
use crate::model::Model;

/// Which cached token positions are scored and attacked.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenSelector {
    #[default]
    LastPrefix,
    Explicit(Vec<usize>),
}

impl TokenSelector {
    pub fn resolve(&self, filled_len: usize) -> Result<Vec<usize>> {
        match self {
            TokenSelector::LastPrefix => filled_len
                .checked_sub(1)
                .map(|t| vec![t])
                .ok_or_else(|| Error::Input("prompt prefix is empty".into())),
            TokenSelector::Explicit(ts) => {
                if ts.is_empty() {
                    return Err(Error::Input("explicit token selector is empty".into()));
                }
                if let Some(t) = ts.iter().find(|t| **t >= filled_len) {
                    return Err(Error::Input(format!(
                        "selected token {t} beyond prefix length {filled_len}"
                    )));
                }
                Ok(ts.clone())
            }
        }
    }

    fn positions(&self) -> Vec<TokenPos> {
        match self {
            TokenSelector::LastPrefix => vec![TokenPos::LastPrefix],
            TokenSelector::Explicit(ts) => ts.iter().map(|t| TokenPos::Index(*t)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvsEntry {
    pub layer: usize,
    pub kv_head: usize,
    pub channel: usize,
    pub score: f64,
}

/// ℓ2 norm of each value channel over all (sample, selected token) entries,
/// for every layer in the subset. Entries are ordered (layer subset order,
/// head, channel).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvsTable {
    pub layers: Vec<usize>,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub entries: Vec<CvsEntry>,
}

impl CvsTable {
    pub fn get(&self, layer: usize, kv_head: usize, channel: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.kv_head == kv_head && e.channel == channel)
            .map(|e| e.score)
    }
}

/// Scores value channels from cache-resident words (decoded to f32).
pub fn cvs_from_caches(caches: &[KvCache], layers: &[usize], selector: &TokenSelector) -> Result<CvsTable> {
    let first = caches
        .first()
        .ok_or_else(|| Error::Input("CVS needs at least one calibration sample".into()))?;
    let layout = first.layout().clone();
    if let Some(l) = layers.iter().find(|l| **l >= layout.n_layers) {
        return Err(Error::Input(format!("layer {l} outside model")));
    }
    let positions = caches
        .iter()
        .map(|c| selector.resolve(c.filled_len()))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(layers.len() * layout.n_kv_heads * layout.head_dim);
    for &layer in layers {
        for h in 0..layout.n_kv_heads {
            for j in 0..layout.head_dim {
                let mut ss = 0.0f64;
                for (cache, ts) in caches.iter().zip(&positions) {
                    for &t in ts {
                        let v = cache.read_value(layer, CacheTensor::V, h, t, j)? as f64;
                        ss += v * v;
                    }
                }
                entries.push(CvsEntry {
                    layer,
                    kv_head: h,
                    channel: j,
                    score: ss.sqrt(),
                });
            }
        }
    }
    Ok(CvsTable {
        layers: layers.to_vec(),
        n_kv_heads: layout.n_kv_heads,
        head_dim: layout.head_dim,
        entries,
    })
}

pub fn prefill_prompts(model: &Model, prompts: &[Prompt]) -> Result<Vec<KvCache>> {
    prompts
        .iter()
        .map(|p| prefill(model, &p.prefix).map(|r| r.cache))
        .collect()
}

pub fn compute_cvs(model: &Model, prompts: &[Prompt], layers: &[usize], selector: &TokenSelector) -> Result<CvsTable> {
    cvs_from_caches(&prefill_prompts(model, prompts)?, layers, selector)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCandidates {
    pub layer: usize,
    /// (kv_head, channel, score), descending score.
    pub channels: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub per_layer: Vec<LayerCandidates>,
    /// Concrete bit targets in (layer subset, channel rank, policy bit) order.
    pub coordinates: Vec<BitCoordinate>,
}

/// Top-`k` (head, channel) pairs per layer, ties broken by (head, channel).
/// Each pair expands into one coordinate per policy bit that is a candidate
/// bit (clear, and finite when set under the guard) for at least one
/// calibration sample at the selected token.
pub fn select_topk(
    table: &CvsTable,
    k: usize,
    policy: &BitPolicy,
    mode: InjectionMode,
    selector: &TokenSelector,
    caches: &[KvCache],
) -> Result<CandidateSet> {
    if k == 0 {
        return Err(Error::Input("k must be at least 1".into()));
    }
    let positions = caches
        .iter()
        .map(|c| selector.resolve(c.filled_len()))
        .collect::<Result<Vec<_>>>()?;
    let mut per_layer = Vec::new();
    let mut coordinates = Vec::new();
    for &layer in &table.layers {
        let mut rows: Vec<&CvsEntry> = table.entries.iter().filter(|e| e.layer == layer).collect();
        rows.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(Ordering::Equal)
                .then((a.kv_head, a.channel).cmp(&(b.kv_head, b.channel)))
        });
        rows.truncate(k);
        for e in &rows {
            let mut bits = BTreeSet::new();
            for (cache, ts) in caches.iter().zip(&positions) {
                for &t in ts {
                    let word = cache.read_word(layer, CacheTensor::V, e.kv_head, t, e.channel)?;
                    bits.extend(candidate_bits(word, policy, cache.dtype()));
                }
            }
            for pos in selector.positions() {
                for &b in policy.bits.iter().filter(|b| bits.contains(b)) {
                    coordinates.push(BitCoordinate {
                        layer,
                        kv_head: e.kv_head,
                        channel: e.channel,
                        bit: b,
                        token_pos: pos,
                        mode,
                    });
                }
            }
        }
        per_layer.push(LayerCandidates {
            layer,
            channels: rows.iter().map(|e| (e.kv_head, e.channel, e.score)).collect(),
        });
    }
    Ok(CandidateSet { per_layer, coordinates })
}
