//! Datasets, tokenization, prompts and verbalizers.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{DatasetError, Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub name: String,
    pub num_classes: usize,
    pub examples: Vec<LabeledExample>,
}

impl LabeledSet {
    /// Validates non-emptiness and that labels cover exactly `0..C`.
    pub fn new(name: impl Into<String>, examples: Vec<LabeledExample>) -> Result<Self> {
        if examples.is_empty() {
            return Err(DatasetError::Empty.into());
        }
        let labels: BTreeSet<usize> = examples.iter().map(|e| e.label).collect();
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        if let Some(missing) = (0..num_classes).find(|c| !labels.contains(c)) {
            return Err(DatasetError::NonDenseLabels {
                classes: num_classes,
                label: missing,
            }
            .into());
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

/// Reads one `{"text": ..., "label": ...}` object per non-blank line.
pub fn load_labeled_jsonl<R: BufRead>(name: &str, source: R) -> Result<LabeledSet> {
    let mut examples = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        let text = value
            .get("text")
            .and_then(|v| v.as_str())
            .ok_or(DatasetError::MissingField { line: line_no, field: "text" })?;
        let label = value
            .get("label")
            .and_then(|v| v.as_u64())
            .ok_or(DatasetError::MissingField { line: line_no, field: "label" })?;
        examples.push(LabeledExample {
            text: text.to_string(),
            label: label as usize,
        });
    }
    LabeledSet::new(name, examples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    /// Token id = byte value + 1.
    ByteLevel,
    /// Greedy longest match over a string vocabulary.
    VocabGreedy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub mode: TokenizerMode,
    #[serde(default)]
    pub vocab: BTreeMap<String, u32>,
    /// Token that closes every prompt and is run as the decode step.
    pub cue_token: u32,
}

impl TokenizerSpec {
    pub fn byte_level(cue_token: u32) -> Self {
        Self {
            mode: TokenizerMode::ByteLevel,
            vocab: BTreeMap::new(),
            cue_token,
        }
    }

    pub fn vocab_greedy(vocab: BTreeMap<String, u32>, cue_token: u32) -> Self {
        Self {
            mode: TokenizerMode::VocabGreedy,
            vocab,
            cue_token,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.cue_token as usize >= vocab_size {
            return Err(Error::Config(format!(
                "cue token {} outside vocabulary of {vocab_size}",
                self.cue_token
            )));
        }
        match self.mode {
            TokenizerMode::ByteLevel if vocab_size < 257 => Err(Error::Config(format!(
                "byte-level tokenizer needs vocab_size >= 257, model has {vocab_size}"
            ))),
            TokenizerMode::VocabGreedy => {
                if self.vocab.is_empty() {
                    return Err(Error::Config("vocab_greedy tokenizer has an empty vocabulary".into()));
                }
                if self.vocab.keys().any(|k| k.is_empty()) {
                    return Err(Error::Config("vocabulary contains an empty string".into()));
                }
                if let Some((k, id)) = self.vocab.iter().find(|(_, id)| **id as usize >= vocab_size) {
                    return Err(Error::Config(format!(
                        "vocabulary entry {k:?} -> {id} outside vocabulary of {vocab_size}"
                    )));
                }
                Ok(())
            }
            TokenizerMode::ByteLevel => Ok(()),
        }
    }
}

pub fn tokenize(spec: &TokenizerSpec, text: &str) -> Result<Vec<u32>> {
    if text.is_empty() {
        return Err(Error::Input("cannot tokenize empty text".into()));
    }
    match spec.mode {
        TokenizerMode::ByteLevel => Ok(text.bytes().map(|b| b as u32 + 1).collect()),
        TokenizerMode::VocabGreedy => {
            let max_chars = spec.vocab.keys().map(|k| k.chars().count()).max().unwrap_or(0);
            let chars: Vec<(usize, char)> = text.char_indices().collect();
            let mut out = Vec::new();
            let mut i = 0;
            'outer: while i < chars.len() {
                let longest = max_chars.min(chars.len() - i);
                for len in (1..=longest).rev() {
                    let start = chars[i].0;
                    let end = chars.get(i + len).map_or(text.len(), |c| c.0);
                    if let Some(id) = spec.vocab.get(&text[start..end]) {
                        out.push(*id);
                        i += len;
                        continue 'outer;
                    }
                }
                return Err(Error::Input(format!(
                    "character {:?} at offset {} not in vocabulary",
                    chars[i].1, chars[i].0
                )));
            }
            Ok(out)
        }
    }
}

/// Tokenized text followed by the cue token. Everything before the cue is
/// the prefix that prefill caches.
pub fn build_prompt(spec: &TokenizerSpec, text: &str, max_seq: usize) -> Result<Vec<u32>> {
    let mut tokens = tokenize(spec, text)?;
    if tokens.len() + 1 > max_seq {
        return Err(Error::Input(format!(
            "prompt of {} tokens plus cue exceeds max_seq {max_seq} (no truncation)",
            tokens.len()
        )));
    }
    tokens.push(spec.cue_token);
    Ok(tokens)
}

/// A prompt split at the decode boundary: `prefix` is prefilled, `cue` is
/// the decode-step token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub prefix: Vec<u32>,
    pub cue: u32,
    pub label: usize,
}

pub fn prepare_prompts(set: &LabeledSet, spec: &TokenizerSpec, max_seq: usize) -> Result<Vec<Prompt>> {
    set.examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut tokens = build_prompt(spec, &ex.text, max_seq)
                .map_err(|e| Error::Input(format!("{} example {i}: {e}", set.name)))?;
            let cue = tokens.pop().expect("prompt ends with cue");
            Ok(Prompt {
                prefix: tokens,
                cue,
                label: ex.label,
            })
        })
        .collect()
}

/// Maps class index to label token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizer {
    tokens: Vec<u32>,
}

impl Verbalizer {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Config("verbalizer has no classes".into()));
        }
        let unique: BTreeSet<_> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(Error::Config("verbalizer maps two classes to one token".into()));
        }
        Ok(Self { tokens })
    }

    /// Parses `{"0": id, "1": id, ...}`; keys must be exactly `0..C`.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, u32> = serde_json::from_str(text)?;
        let mut by_class = BTreeMap::new();
        for (k, v) in raw {
            let c: usize = k
                .parse()
                .map_err(|_| Error::Config(format!("verbalizer key {k:?} is not a class index")))?;
            by_class.insert(c, v);
        }
        if by_class.keys().enumerate().any(|(i, c)| i != *c) {
            return Err(Error::Config("verbalizer classes are not dense from 0".into()));
        }
        Self::new(by_class.into_values().collect())
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, u32> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(c, t)| (c.to_string(), *t))
            .collect();
        serde_json::to_string(&map).expect("serializable")
    }

    pub fn num_classes(&self) -> usize {
        self.tokens.len()
    }

    pub fn label_tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.tokens.iter().find(|t| **t as usize >= vocab_size) {
            Some(t) => Err(Error::Config(format!(
                "verbalizer token {t} outside vocabulary of {vocab_size}"
            ))),
            None => Ok(()),
        }
    }
}

/// Deterministic subset of `n` examples without replacement: a partial
/// Fisher-Yates shuffle driven by SplitMix64(`seed`), index `i` swapped with
/// `i + next_u64() % (len - i)`.
pub fn sample_calibration(set: &LabeledSet, n: usize, seed: u64) -> Result<LabeledSet> {
    if n == 0 {
        return Err(Error::Input("calibration sample count must be at least 1".into()));
    }
    if n > set.len() {
        return Err(Error::Input(format!(
            "requested {n} calibration samples from a set of {}",
            set.len()
        )));
    }
    let mut idx: Vec<usize> = (0..set.len()).collect();
    let mut rng = SplitMix64::new(seed);
    for i in 0..n {
        let j = i + rng.next_below(set.len() - i);
        idx.swap(i, j);
    }
    let examples = idx[..n].iter().map(|&i| set.examples[i].clone()).collect();
    Ok(LabeledSet {
        name: format!("{}[calib n={n} seed={seed}]", set.name),
        num_classes: set.num_classes,
        examples,
    })
}
