//! Reference-logit fixtures produced outside this crate, e.g. by a checkpoint
//! exporter: `{"prompts": [{"tokens": [...], "logits": [...]}]}`.

use serde::{Deserialize, Serialize};

use crate::engine::prefill;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub tokens: Vec<u32>,
    pub logits: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub prompts: Vec<FixtureEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureCheck {
    pub prompts: usize,
    pub max_abs_diff: f64,
    pub per_prompt: Vec<f64>,
}

impl FixtureCheck {
    pub fn within(&self, tol: f64) -> bool {
        self.max_abs_diff <= tol
    }
}

/// Next-token logits after each fixture prompt versus the stored reference.
pub fn check_fixture(model: &Model, fixture: &Fixture) -> Result<FixtureCheck> {
    let mut per_prompt = Vec::with_capacity(fixture.prompts.len());
    for (i, entry) in fixture.prompts.iter().enumerate() {
        if entry.logits.len() != model.config.vocab_size {
            return Err(Error::Input(format!(
                "fixture prompt {i}: {} logits for vocabulary of {}",
                entry.logits.len(),
                model.config.vocab_size
            )));
        }
        let out = prefill(model, &entry.tokens).map_err(|e| Error::Input(format!("fixture prompt {i}: {e}")))?;
        let diff = out
            .logits
            .iter()
            .zip(&entry.logits)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max);
        per_prompt.push(diff);
    }
    Ok(FixtureCheck {
        prompts: per_prompt.len(),
        max_abs_diff: per_prompt.iter().copied().fold(0.0, f64::max),
        per_prompt,
    })
}
