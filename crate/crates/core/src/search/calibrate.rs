use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitflip::{apply_fault, revert_fault, BitCoordinate, InjectionMode, TokenPos, Transition};
use crate::data::{Prompt, Verbalizer};
use crate::engine::{classify_logits, decode_step, prefill};
use crate::error::{Error, Result};
use crate::model::Model;

/// Maximum coordinate × sample evaluations the oracle will run.
pub const ORACLE_GUARD: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrRow {
    pub coordinate: BitCoordinate,
    /// Samples predicted as each class under this fault.
    pub counts: Vec<u32>,
    /// `counts[c] / samples`.
    pub rates: Vec<f64>,
    /// Samples whose label logits contained NaN; they count toward no class.
    pub undefined: u32,
    /// Samples where the fault left the word unchanged.
    pub noop: u32,
}

impl AsrRow {
    pub fn rate(&self, class: usize) -> f64 {
        self.rates[class]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrMatrix {
    pub num_classes: usize,
    pub samples: usize,
    pub rows: Vec<AsrRow>,
}

impl AsrMatrix {
    pub fn row(&self, coord: &BitCoordinate) -> Option<&AsrRow> {
        self.rows.iter().find(|r| &r.coordinate == coord)
    }
}

#[derive(Clone, Copy)]
struct Outcome {
    class: Option<usize>,
    noop: bool,
}

fn evaluate_sample(model: &Model, prompt: &Prompt, coords: &[BitCoordinate], verbalizer: &Verbalizer) -> Result<Vec<Outcome>> {
    let mut cache = prefill(model, &prompt.prefix)?.cache;
    let mut out = Vec::with_capacity(coords.len());
    for coord in coords {
        let receipt = apply_fault(&mut cache, coord)?;
        let logits = decode_step(model, &cache, prompt.cue);
        revert_fault(&mut cache, &receipt);
        let class = match classify_logits(&logits?, verbalizer) {
            Ok((c, _)) => Some(c),
            Err(Error::UndefinedPrediction { .. }) => None,
            Err(e) => return Err(e),
        };
        out.push(Outcome {
            class,
            noop: receipt.transition == Transition::None && !receipt.changed,
        });
    }
    Ok(out)
}

/// Runs every coordinate on every sample (prefill once per sample, then
/// fault, decode, revert per coordinate). Parallel over samples on the
/// current rayon pool; counts merge in sample order.
fn evaluate(model: &Model, prompts: &[Prompt], coords: &[BitCoordinate], verbalizer: &Verbalizer) -> Result<AsrMatrix> {
    verbalizer.check_vocab(model.config.vocab_size)?;
    for c in coords {
        c.check_bounds(&model.config)?;
    }
    let per_sample = prompts
        .par_iter()
        .map(|p| evaluate_sample(model, p, coords, verbalizer))
        .collect::<Result<Vec<_>>>()?;
    let classes = verbalizer.num_classes();
    let n = prompts.len();
    let rows = coords
        .iter()
        .enumerate()
        .map(|(i, coord)| {
            let mut counts = vec![0u32; classes];
            let (mut undefined, mut noop) = (0, 0);
            for sample in &per_sample {
                let o = sample[i];
                match o.class {
                    Some(c) => counts[c] += 1,
                    None => undefined += 1,
                }
                noop += o.noop as u32;
            }
            let rates = counts
                .iter()
                .map(|&k| if n == 0 { 0.0 } else { k as f64 / n as f64 })
                .collect();
            AsrRow {
                coordinate: *coord,
                counts,
                rates,
                undefined,
                noop,
            }
        })
        .collect();
    Ok(AsrMatrix {
        num_classes: classes,
        samples: n,
        rows,
    })
}

pub fn calibrate_asr(model: &Model, prompts: &[Prompt], candidates: &[BitCoordinate], verbalizer: &Verbalizer) -> Result<AsrMatrix> {
    if candidates.is_empty() {
        return Err(Error::Input("no candidate coordinates to calibrate".into()));
    }
    if prompts.is_empty() {
        return Err(Error::Input("empty calibration set".into()));
    }
    evaluate(model, prompts, candidates, verbalizer)
}

/// Cartesian scope for the oracle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeGrid {
    pub layers: Vec<usize>,
    pub kv_heads: Vec<usize>,
    pub channels: Vec<usize>,
    pub bits: Vec<u32>,
    #[serde(default = "last_prefix")]
    pub token_pos: TokenPos,
    #[serde(default)]
    pub mode: InjectionMode,
}

fn last_prefix() -> TokenPos {
    TokenPos::LastPrefix
}

impl ScopeGrid {
    /// Every coordinate of the model at the given bits.
    pub fn full(cfg: &crate::config::ModelConfig, bits: Vec<u32>, mode: InjectionMode) -> Self {
        Self {
            layers: (0..cfg.n_layers).collect(),
            kv_heads: (0..cfg.n_kv_heads).collect(),
            channels: (0..cfg.head_dim).collect(),
            bits,
            token_pos: TokenPos::LastPrefix,
            mode,
        }
    }

    pub fn coordinates(&self) -> Vec<BitCoordinate> {
        let mut out = Vec::new();
        for &layer in &self.layers {
            for &kv_head in &self.kv_heads {
                for &channel in &self.channels {
                    for &bit in &self.bits {
                        out.push(BitCoordinate {
                            layer,
                            kv_head,
                            channel,
                            bit,
                            token_pos: self.token_pos,
                            mode: self.mode,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.layers.len() * self.kv_heads.len() * self.channels.len() * self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleScope {
    Grid(ScopeGrid),
    Coordinates(Vec<BitCoordinate>),
}

impl OracleScope {
    pub fn coordinates(&self) -> Vec<BitCoordinate> {
        match self {
            OracleScope::Grid(g) => g.coordinates(),
            OracleScope::Coordinates(c) => c.clone(),
        }
    }
}

/// Brute-force ASR over every coordinate in `scope`, through the same
/// evaluation path as [`calibrate_asr`].
pub fn exhaustive_search_oracle(model: &Model, prompts: &[Prompt], scope: &OracleScope, verbalizer: &Verbalizer) -> Result<AsrMatrix> {
    let coords = scope.coordinates();
    let evaluations = coords.len() as u64 * prompts.len() as u64;
    if evaluations > ORACLE_GUARD {
        return Err(Error::Guard {
            evaluations,
            limit: ORACLE_GUARD,
        });
    }
    evaluate(model, prompts, &coords, verbalizer)
}
