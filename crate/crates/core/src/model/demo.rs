//! Hand-wired verification model with known trigger channels.
//!
//! Query and key projections are zero, so every head attends uniformly over
//! the cached prefix plus the current token. Residual dimensions:
//!
//! | dim           | role                                           |
//! |---------------|------------------------------------------------|
//! | 0             | constant 1 in every embedding                  |
//! | 1             | cue-token marker                               |
//! | 2 .. 2+C      | `F_c`: class votes                             |
//! | 2+C .. 2+2C   | `R_c`: trigger routes                          |
//! | rest          | MLP scratch, filled from the seed              |
//!
//! Content token `v` votes for class `v % C`; the cue token is `vocab - 1`.
//! Layer 0 has one value channel per class copying `F_c` through the
//! attention average back into `F_c`, so the cue position sees the mean vote.
//! Each target channel reads the constant dimension and writes
//! [`TRIGGER_CONSTANT`] for every token, routed by `W_o` into `R_c`. Label
//! token `c` reads `F_c + 4 R_c`. All target channels share one layer, so the
//! `R_c` are bit-identical across classes on a clean run and the prediction
//! is the majority vote (ties to the lowest class). Raising one target value
//! at the last prefix token lifts only its `R_c`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::{LabeledExample, LabeledSet, TokenizerSpec, Verbalizer};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Value written by every target channel on a clean run.
pub const TRIGGER_CONSTANT: f32 = 0.0625;
const ROUTE_GAIN: f32 = 4.0;
const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TargetChannel {
    pub layer: usize,
    pub kv_head: usize,
    pub channel: usize,
}

#[derive(Debug, Clone)]
pub struct TrojanDemo {
    pub model: Model,
    /// Indexed by class.
    pub targets: Vec<TargetChannel>,
    /// Value channels in layer 0 that carry the class votes, indexed by class.
    pub vote_channels: Vec<TargetChannel>,
    pub verbalizer: Verbalizer,
    pub tokenizer: TokenizerSpec,
}

impl TrojanDemo {
    pub fn num_classes(&self) -> usize {
        self.targets.len()
    }

    pub fn cue_token(&self) -> u32 {
        self.tokenizer.cue_token
    }

    /// Majority vote over the prefix tokens, ties to the lowest class.
    pub fn benign_class(&self, prefix: &[u32]) -> usize {
        let c = self.num_classes();
        let mut votes = vec![0usize; c];
        for &t in prefix {
            if t != self.cue_token() {
                votes[t as usize % c] += 1;
            }
        }
        let mut best = 0;
        for k in 1..c {
            if votes[k] > votes[best] {
                best = k;
            }
        }
        best
    }

    /// Deterministic labeled probe set whose labels follow the benign rule,
    /// balanced across classes, avoiding any text in `exclude`.
    pub fn probe_set(&self, name: &str, n: usize, seed: u64, exclude: Option<&LabeledSet>) -> Result<LabeledSet> {
        let c = self.num_classes();
        let content = self.model.config.vocab_size - 1;
        let alphabet: Vec<char> = ALPHABET.chars().take(content).collect();
        let max_len = (self.model.config.max_seq - 1).min(10);
        let min_len = 3.min(max_len);
        let mut quota: Vec<usize> = (0..c).map(|k| n / c + usize::from(k < n % c)).collect();
        let mut seen: BTreeSet<String> = exclude
            .map(|s| s.examples.iter().map(|e| e.text.clone()).collect())
            .unwrap_or_default();
        let mut rng = SplitMix64::new(seed);
        let mut examples = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while examples.len() < n {
            attempts += 1;
            if attempts > 1000 * n.max(1) {
                return Err(Error::Input("could not generate enough distinct probe prompts".into()));
            }
            let len = min_len + rng.next_below(max_len - min_len + 1);
            let tokens: Vec<u32> = (0..len).map(|_| rng.next_below(content) as u32).collect();
            let label = self.benign_class(&tokens);
            if quota[label] == 0 {
                continue;
            }
            let text: String = tokens.iter().map(|&t| alphabet[t as usize]).collect();
            if !seen.insert(text.clone()) {
                continue;
            }
            quota[label] -= 1;
            examples.push(LabeledExample { text, label });
        }
        LabeledSet::new(name, examples)
    }
}

/// Builds the demo model. `targets[c]` is the trigger channel for class `c`;
/// all targets must share one layer and be distinct. Layer 0 additionally
/// needs one free value channel per class for the votes.
pub fn build_trojan_demo_model(config: ModelConfig, targets: &[TargetChannel], seed: u64) -> Result<TrojanDemo> {
    config.validate()?;
    let c = targets.len();
    if c == 0 {
        return Err(Error::Config("demo model needs at least one class".into()));
    }
    for t in targets {
        if t.layer >= config.n_layers || t.kv_head >= config.n_kv_heads || t.channel >= config.head_dim {
            return Err(Error::Config(format!("target channel {t:?} outside model bounds")));
        }
    }
    let layer = targets[0].layer;
    if targets.iter().any(|t| t.layer != layer) {
        return Err(Error::Config("demo target channels must share one layer".into()));
    }
    if targets.iter().collect::<BTreeSet<_>>().len() != c {
        return Err(Error::Config("demo target channels must be distinct".into()));
    }
    if config.d_model < 2 + 2 * c {
        return Err(Error::Config(format!(
            "demo model with {c} classes needs d_model >= {}",
            2 + 2 * c
        )));
    }
    if config.vocab_size < c + 2 || config.vocab_size - 1 > ALPHABET.chars().count() {
        return Err(Error::Config(format!(
            "demo vocab_size must be in {}..={}",
            c + 2,
            ALPHABET.chars().count() + 1
        )));
    }
    let vote_channels: Vec<TargetChannel> = (0..config.n_kv_heads)
        .flat_map(|h| (0..config.head_dim).map(move |j| TargetChannel { layer: 0, kv_head: h, channel: j }))
        .filter(|ch| !targets.contains(ch))
        .take(c)
        .collect();
    if vote_channels.len() < c {
        return Err(Error::Config("layer 0 has no room for the vote channels".into()));
    }

    let d = config.d_model;
    let hd = config.head_dim;
    let group = config.group_size();
    let nominal_rms = (2.0 / d as f32).sqrt();
    let f_dim = |k: usize| 2 + k;
    let r_dim = |k: usize| 2 + c + k;
    let spare: Vec<usize> = (2 + 2 * c..d).collect();
    let cue = (config.vocab_size - 1) as u32;

    let mut model = Model::zeros(config)?;
    let cfg = model.config.clone();
    let mut rng = SplitMix64::new(seed);

    for v in 0..cfg.vocab_size {
        let row = &mut model.embed[v * d..(v + 1) * d];
        row[0] = 1.0;
        if v as u32 == cue {
            row[1] = 1.0;
        } else {
            row[f_dim(v % c)] = 1.0;
        }
    }

    // Value row index for (kv_head, channel) and the W_o column of the first
    // query head in that group.
    let v_row = |ch: &TargetChannel| ch.kv_head * hd + ch.channel;
    let o_col = |ch: &TargetChannel| ch.kv_head * group * hd + ch.channel;
    let q_width = cfg.n_heads * hd;

    for (k, ch) in vote_channels.iter().enumerate() {
        let l = &mut model.layers[0];
        l.wv[v_row(ch) * d + f_dim(k)] = nominal_rms;
        l.wo[f_dim(k) * q_width + o_col(ch)] = 1.0;
    }
    for (k, ch) in targets.iter().enumerate() {
        let l = &mut model.layers[ch.layer];
        l.wv[v_row(ch) * d] = TRIGGER_CONSTANT * nominal_rms;
        l.wo[r_dim(k) * q_width + o_col(ch)] = 1.0;
    }

    let scale = 1.0 / (d as f32).sqrt();
    for l in model.layers.iter_mut() {
        for w in l.w_up.iter_mut() {
            *w = rng.next_symmetric_f32(scale);
        }
        for &row in &spare {
            for w in l.w_down[row * cfg.ffn_dim..(row + 1) * cfg.ffn_dim].iter_mut() {
                *w = rng.next_symmetric_f32(scale);
            }
        }
    }

    for v in 0..cfg.vocab_size {
        let row = &mut model.unembed[v * d..(v + 1) * d];
        if v < c {
            row[f_dim(v)] = 1.0;
            row[r_dim(v)] = ROUTE_GAIN;
        } else {
            for w in row.iter_mut() {
                *w = rng.next_symmetric_f32(scale);
            }
        }
    }

    let vocab: BTreeMap<String, u32> = ALPHABET
        .chars()
        .take(cfg.vocab_size - 1)
        .enumerate()
        .map(|(i, ch)| (ch.to_string(), i as u32))
        .collect();
    Ok(TrojanDemo {
        model,
        targets: targets.to_vec(),
        vote_channels,
        verbalizer: Verbalizer::new((0..c as u32).collect())?,
        tokenizer: TokenizerSpec::vocab_greedy(vocab, cue),
    })
}
