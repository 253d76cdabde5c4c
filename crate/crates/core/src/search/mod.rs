//! Data-free, gradient-free search for single-bit value-cache triggers:
//! layer screening by activation spread, channel ranking by cached value
//! magnitude, then ASR calibration of the surviving bit coordinates.

mod calibrate;
mod cvs;
mod lss;
mod map;

pub use calibrate::{
    calibrate_asr, exhaustive_search_oracle, AsrMatrix, AsrRow, OracleScope, ScopeGrid, ORACLE_GUARD,
};
pub use cvs::{
    compute_cvs, cvs_from_caches, prefill_prompts, select_topk, CandidateSet, CvsEntry, CvsTable,
    LayerCandidates, TokenSelector,
};
pub use lss::{compute_lss, lss_from_traces, select_sensitive_layers, LayerSubset, LssReport};
pub use map::{build_corruption_map, ClassTrigger, CorruptionMap, RankedCoordinate};

use serde::{Deserialize, Serialize};

use crate::bitflip::{BitPolicy, InjectionMode};
use crate::config::CacheDtype;
use crate::data::{Prompt, Verbalizer};
use crate::error::{Error, Result};
use crate::model::Model;

fn default_m() -> usize {
    5
}
fn default_k() -> usize {
    32
}
fn default_tau() -> f64 {
    0.95
}
fn default_n() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Layer subset size; clamped to the model depth.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Defaults to the cache dtype's exponent bits when absent.
    #[serde(default)]
    pub policy: Option<BitPolicy>,
    #[serde(default)]
    pub mode: InjectionMode,
    #[serde(default)]
    pub selector: TokenSelector,
    #[serde(default = "default_n")]
    pub calibration_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            m: default_m(),
            k: default_k(),
            tau: default_tau(),
            policy: None,
            mode: InjectionMode::SetToOne,
            selector: TokenSelector::LastPrefix,
            calibration_samples: default_n(),
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, n_layers: usize, dtype: CacheDtype) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("search.m must be at least 1".into()));
        }
        if self.m > n_layers {
            return Err(Error::Config(format!("search.m {} exceeds {n_layers} layers", self.m)));
        }
        if self.k == 0 {
            return Err(Error::Config("search.k must be at least 1".into()));
        }
        // tau above 1 is allowed: it yields an incomplete map by construction.
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config("search.tau must be positive".into()));
        }
        if self.calibration_samples == 0 {
            return Err(Error::Config("search.calibration_samples must be at least 1".into()));
        }
        self.resolved_policy(dtype).validate(dtype)
    }

    pub fn resolved_policy(&self, dtype: CacheDtype) -> BitPolicy {
        self.policy.clone().unwrap_or_else(|| BitPolicy::exponent(dtype))
    }
}

/// Every intermediate of one search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub lss: LssReport,
    pub layers: LayerSubset,
    pub cvs: CvsTable,
    pub candidates: CandidateSet,
    pub matrix: AsrMatrix,
    pub map: CorruptionMap,
}

/// LSS screening, CVS ranking, top-k expansion, ASR calibration and map
/// construction over already-sampled calibration prompts.
pub fn run_search(model: &Model, prompts: &[Prompt], verbalizer: &Verbalizer, cfg: &SearchConfig) -> Result<SearchOutcome> {
    let dtype = model.config.cache_dtype;
    cfg.validate(model.config.n_layers, dtype)?;
    let policy = cfg.resolved_policy(dtype);
    let lss = compute_lss(model, prompts)?;
    let layers = select_sensitive_layers(&lss, cfg.m)?;
    let caches = prefill_prompts(model, prompts)?;
    let cvs = cvs_from_caches(&caches, &layers.0, &cfg.selector)?;
    let candidates = select_topk(&cvs, cfg.k, &policy, cfg.mode, &cfg.selector, &caches)?;
    let matrix = calibrate_asr(model, prompts, &candidates.coordinates, verbalizer)?;
    let map = build_corruption_map(&matrix, cfg.tau)?;
    Ok(SearchOutcome {
        lss,
        layers,
        cvs,
        candidates,
        matrix,
        map,
    })
}
