use serde::{Deserialize, Serialize};

use crate::data::Prompt;
use crate::engine::{prefill, HiddenTrace};
use crate::error::{Error, Result};

/// Per-block score `|σ(h_{l+1}) − σ(h_l)|` for blocks `0..L` (block `l`
/// maps hidden state `h_l` to `h_{l+1}`). σ is the population standard
/// deviation pooled over every (sample, token, hidden dim) entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LssReport {
    pub scores: Vec<f64>,
    /// Pooled σ of `h_0..h_L`.
    pub sigmas: Vec<f64>,
    pub samples: usize,
    pub tokens: usize,
}

/// Block indices ordered by descending score, ties to the lower index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSubset(pub Vec<usize>);

#[derive(Default, Clone, Copy)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn population_std(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

/// Scores from already-collected traces. All traces must have the same depth.
pub fn lss_from_traces(traces: &[HiddenTrace]) -> Result<LssReport> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Input("LSS needs at least one calibration sample".into()))?;
    let depth = first.layers.len();
    if depth < 2 || traces.iter().any(|t| t.layers.len() != depth) {
        return Err(Error::Input("hidden traces have inconsistent depth".into()));
    }
    let mut acc = vec![Welford::default(); depth];
    for trace in traces {
        for (w, h) in acc.iter_mut().zip(&trace.layers) {
            for v in h {
                w.push(*v as f64);
            }
        }
    }
    let sigmas: Vec<f64> = acc.iter().map(Welford::population_std).collect();
    let scores = sigmas.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    Ok(LssReport {
        scores,
        sigmas,
        samples: traces.len(),
        tokens: traces.iter().map(|t| t.tokens).sum(),
    })
}

/// Traces the prefix of every calibration prompt and scores each block.
pub fn compute_lss(model: &crate::model::Model, prompts: &[Prompt]) -> Result<LssReport> {
    if prompts.is_empty() {
        return Err(Error::Input("empty calibration set".into()));
    }
    let traces = prompts
        .iter()
        .map(|p| prefill(model, &p.prefix).map(|r| r.trace))
        .collect::<Result<Vec<_>>>()?;
    lss_from_traces(&traces)
}

pub fn select_sensitive_layers(report: &LssReport, m: usize) -> Result<LayerSubset> {
    let l = report.scores.len();
    if m == 0 || m > l {
        return Err(Error::Input(format!("layer subset size {m} outside 1..={l}")));
    }
    let mut idx: Vec<usize> = (0..l).collect();
    idx.sort_by(|&a, &b| report.scores[b].total_cmp(&report.scores[a]).then(a.cmp(&b)));
    idx.truncate(m);
    Ok(LayerSubset(idx))
}
