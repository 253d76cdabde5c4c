//! Single-sequence forward pass.
//!
//! Prefill runs the prompt prefix and writes every token's key and value into
//! the cache (rounded to the cache dtype). The classification decode step then
//! runs the final prompt token against that cache. Attention in both phases
//! reads keys and values back from their stored words, so a decode step sees
//! exactly what prefill would have seen at the same position. All arithmetic
//! accumulates in f32.

use crate::bitflip::{apply_fault, revert_fault, BitCoordinate, FaultReceipt};
use crate::config::{ModelConfig, PosScheme};
use crate::data::Verbalizer;
use crate::error::{Error, Result};
use crate::kv_cache::{CacheTensor, KvCache};
use crate::model::{LayerWeights, Model};

/// Hidden states `h_0..h_L`, each `[tokens, d_model]` row-major. `h_0` is the
/// token embedding and `h_l` the output of block `l` after both residual adds.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTrace {
    pub d_model: usize,
    pub tokens: usize,
    pub layers: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Prefill {
    pub cache: KvCache,
    pub trace: HiddenTrace,
    /// Next-token logits at the last prefilled position.
    pub logits: Vec<f32>,
}

/// An optional fault applied to the cache just before the decode step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FaultHook {
    pub coordinate: Option<BitCoordinate>,
    pub armed: bool,
}

impl FaultHook {
    pub fn disarmed() -> Self {
        Self::default()
    }

    pub fn armed(coordinate: BitCoordinate) -> Self {
        Self {
            coordinate: Some(coordinate),
            armed: true,
        }
    }

    /// Holds a coordinate without firing it.
    pub fn loaded(coordinate: BitCoordinate) -> Self {
        Self {
            coordinate: Some(coordinate),
            armed: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub predicted: usize,
    pub label_logits: Vec<f32>,
    pub receipt: Option<FaultReceipt>,
}

pub(crate) fn rms_norm(x: &[f32], gain: &[f32], eps: f32, out: &mut [f32]) {
    let mut ss = 0.0f32;
    for v in x {
        ss += v * v;
    }
    let inv = 1.0 / (ss / x.len() as f32 + eps).sqrt();
    for ((o, v), g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

pub(crate) fn matvec(w: &[f32], x: &[f32], out: &mut [f32]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0f32;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o = acc;
    }
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotates consecutive channel pairs `(2i, 2i+1)` by `pos * 10000^(-2i/d)`.
pub(crate) fn apply_rotary(v: &mut [f32], pos: usize) {
    let d = v.len();
    for i in 0..d / 2 {
        let inv_freq = 10000f32.powf(-((2 * i) as f32) / d as f32);
        let angle = pos as f32 * inv_freq;
        let (s, c) = angle.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Scaled dot-product attention of one query head over `n` cached positions.
fn attend(q: &[f32], keys: &[f32], values: &[f32], out: &mut [f32]) {
    let d = q.len();
    let n = keys.len() / d;
    let scale = 1.0 / (d as f32).sqrt();
    let mut scores = Vec::with_capacity(n);
    for t in 0..n {
        let k = &keys[t * d..(t + 1) * d];
        let mut acc = 0.0f32;
        for (a, b) in q.iter().zip(k) {
            acc += a * b;
        }
        scores.push(acc * scale);
    }
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    for t in 0..n {
        let p = scores[t] / sum;
        for (o, v) in out.iter_mut().zip(&values[t * d..(t + 1) * d]) {
            *o += p * v;
        }
    }
}

struct Scratch {
    normed: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    attn: Vec<f32>,
    proj: Vec<f32>,
    up: Vec<f32>,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl Scratch {
    fn new(cfg: &ModelConfig) -> Self {
        let q = cfg.n_heads * cfg.head_dim;
        Self {
            normed: vec![0.0; cfg.d_model],
            q: vec![0.0; q],
            k: vec![0.0; cfg.kv_dim()],
            v: vec![0.0; cfg.kv_dim()],
            attn: vec![0.0; q],
            proj: vec![0.0; cfg.d_model],
            up: vec![0.0; cfg.ffn_dim],
            keys: Vec::new(),
            values: Vec::new(),
        }
    }
}

/// Computes this position's q, k, v (rotary applied to q and k).
fn project_qkv(cfg: &ModelConfig, layer: &LayerWeights, h: &[f32], pos: usize, s: &mut Scratch) {
    rms_norm(h, &layer.norm_attn, cfg.norm_eps, &mut s.normed);
    matvec(&layer.wq, &s.normed, &mut s.q);
    matvec(&layer.wk, &s.normed, &mut s.k);
    matvec(&layer.wv, &s.normed, &mut s.v);
    if cfg.pos_scheme == PosScheme::Rotary {
        for head in s.q.chunks_mut(cfg.head_dim) {
            apply_rotary(head, pos);
        }
        for head in s.k.chunks_mut(cfg.head_dim) {
            apply_rotary(head, pos);
        }
    }
}

/// Attention readout for query position `pos`, attending over cached
/// positions `0..ctx` of `layer` plus an optional extra (k, v) pair already
/// rounded to the cache dtype. Adds the attention and MLP residuals to `h`.
#[allow(clippy::too_many_arguments)]
fn finish_block(
    cfg: &ModelConfig,
    layer_idx: usize,
    layer: &LayerWeights,
    cache: &KvCache,
    ctx: usize,
    extra: Option<(&[f32], &[f32])>,
    h: &mut [f32],
    s: &mut Scratch,
) {
    let d = cfg.head_dim;
    let n = ctx + extra.is_some() as usize;
    for kv_head in 0..cfg.n_kv_heads {
        s.keys.resize(n * d, 0.0);
        s.values.resize(n * d, 0.0);
        for t in 0..ctx {
            cache.load_head(layer_idx, CacheTensor::K, kv_head, t, &mut s.keys[t * d..(t + 1) * d]);
            cache.load_head(layer_idx, CacheTensor::V, kv_head, t, &mut s.values[t * d..(t + 1) * d]);
        }
        if let Some((k, v)) = extra {
            s.keys[ctx * d..n * d].copy_from_slice(&k[kv_head * d..(kv_head + 1) * d]);
            s.values[ctx * d..n * d].copy_from_slice(&v[kv_head * d..(kv_head + 1) * d]);
        }
        for g in 0..cfg.group_size() {
            let qh = kv_head * cfg.group_size() + g;
            let (q, out) = (&s.q[qh * d..(qh + 1) * d], &mut s.attn[qh * d..(qh + 1) * d]);
            attend(q, &s.keys, &s.values, out);
        }
    }
    matvec(&layer.wo, &s.attn, &mut s.proj);
    for (a, b) in h.iter_mut().zip(&s.proj) {
        *a += b;
    }
    rms_norm(h, &layer.norm_mlp, cfg.norm_eps, &mut s.normed);
    matvec(&layer.w_up, &s.normed, &mut s.up);
    s.up.iter_mut().for_each(|u| *u = silu(*u));
    matvec(&layer.w_down, &s.up, &mut s.proj);
    for (a, b) in h.iter_mut().zip(&s.proj) {
        *a += b;
    }
}

fn final_logits(model: &Model, h: &[f32]) -> Vec<f32> {
    let cfg = &model.config;
    let mut normed = vec![0.0; cfg.d_model];
    rms_norm(h, &model.norm_final, cfg.norm_eps, &mut normed);
    let mut logits = vec![0.0; cfg.vocab_size];
    matvec(&model.unembed, &normed, &mut logits);
    logits
}

fn check_token(cfg: &ModelConfig, token: u32) -> Result<()> {
    if token as usize >= cfg.vocab_size {
        return Err(Error::Input(format!(
            "token id {token} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    Ok(())
}

fn embed(model: &Model, token: u32) -> &[f32] {
    let d = model.config.d_model;
    &model.embed[token as usize * d..(token as usize + 1) * d]
}

/// Runs the prefix through every block, filling the cache and recording the
/// hidden trace. Requires `1 <= tokens.len() <= max_seq - 1` so that one
/// decode slot remains.
pub fn prefill(model: &Model, tokens: &[u32]) -> Result<Prefill> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq - 1 {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds prefill capacity {}",
            tokens.len(),
            cfg.max_seq - 1
        )));
    }
    for &t in tokens {
        check_token(cfg, t)?;
    }
    let n = tokens.len();
    let d_model = cfg.d_model;
    let mut cache = KvCache::new(cfg);
    let mut s = Scratch::new(cfg);

    let mut hidden: Vec<f32> = tokens.iter().flat_map(|&t| embed(model, t).iter().copied()).collect();
    let mut trace = Vec::with_capacity(cfg.n_layers + 1);
    trace.push(hidden.clone());

    for (l, layer) in model.layers.iter().enumerate() {
        for pos in 0..n {
            project_qkv(cfg, layer, &hidden[pos * d_model..(pos + 1) * d_model], pos, &mut s);
            for kv_head in 0..cfg.n_kv_heads {
                let r = kv_head * cfg.head_dim..(kv_head + 1) * cfg.head_dim;
                cache.store_head(l, CacheTensor::K, kv_head, pos, &s.k[r.clone()]);
                cache.store_head(l, CacheTensor::V, kv_head, pos, &s.v[r]);
            }
            cache.set_filled_len(cache.filled_len().max(pos + 1));
            finish_block(
                cfg,
                l,
                layer,
                &cache,
                pos + 1,
                None,
                &mut hidden[pos * d_model..(pos + 1) * d_model],
                &mut s,
            );
        }
        trace.push(hidden.clone());
    }
    cache.set_filled_len(n);
    let logits = final_logits(model, &hidden[(n - 1) * d_model..]);
    Ok(Prefill {
        cache,
        trace: HiddenTrace {
            d_model,
            tokens: n,
            layers: trace,
        },
        logits,
    })
}

/// One decode step for `token` at position `filled_len`, attending over the
/// cache as it currently stands. The cache is not modified. Returns the full
/// vocabulary logits.
pub fn decode_step(model: &Model, cache: &KvCache, token: u32) -> Result<Vec<f32>> {
    let cfg = &model.config;
    check_token(cfg, token)?;
    let ctx = cache.filled_len();
    if ctx == 0 {
        return Err(Error::Input("decode on an empty cache".into()));
    }
    if ctx >= cfg.max_seq {
        return Err(Error::Input("cache is full; no decode slot".into()));
    }
    let dtype = cfg.cache_dtype;
    let mut s = Scratch::new(cfg);
    let mut h = embed(model, token).to_vec();
    for (l, layer) in model.layers.iter().enumerate() {
        project_qkv(cfg, layer, &h, ctx, &mut s);
        let k: Vec<f32> = s.k.iter().map(|v| dtype.decode(dtype.encode(*v))).collect();
        let v: Vec<f32> = s.v.iter().map(|x| dtype.decode(dtype.encode(*x))).collect();
        finish_block(cfg, l, layer, cache, ctx, Some((&k, &v)), &mut h, &mut s);
    }
    Ok(final_logits(model, &h))
}

/// Restricts `logits` to the verbalizer's label tokens and takes the argmax,
/// ties to the lowest class. A NaN label logit is an error, never a class.
pub fn classify_logits(logits: &[f32], verbalizer: &Verbalizer) -> Result<(usize, Vec<f32>)> {
    let label_logits: Vec<f32> = verbalizer
        .label_tokens()
        .iter()
        .map(|&t| logits[t as usize])
        .collect();
    if let Some(class) = label_logits.iter().position(|v| v.is_nan()) {
        return Err(Error::UndefinedPrediction { class });
    }
    let mut best = 0;
    for (c, v) in label_logits.iter().enumerate().skip(1) {
        if *v > label_logits[best] {
            best = c;
        }
    }
    Ok((best, label_logits))
}

/// Decode step under a fault hook. If the hook is armed its fault is applied
/// before the step reads the cache; the cache is restored before returning
/// and the receipt records what was applied. Returns the full logits.
pub fn decode_with_hook(
    model: &Model,
    cache: &mut KvCache,
    token: u32,
    hook: &FaultHook,
) -> Result<(Vec<f32>, Option<FaultReceipt>)> {
    let receipt = match (hook.armed, hook.coordinate) {
        (true, Some(coord)) => {
            coord.check_bounds(&model.config)?;
            Some(apply_fault(cache, &coord)?)
        }
        (true, None) => return Err(Error::Injection("armed hook without a coordinate".into())),
        (false, _) => None,
    };
    let logits = decode_step(model, cache, token);
    if let Some(r) = &receipt {
        revert_fault(cache, r);
    }
    Ok((logits?, receipt))
}

/// Classification decode through [`decode_with_hook`].
pub fn decode_classify(
    model: &Model,
    cache: &mut KvCache,
    final_token: u32,
    verbalizer: &Verbalizer,
    hook: &FaultHook,
) -> Result<Classification> {
    verbalizer.check_vocab(model.config.vocab_size)?;
    let (logits, receipt) = decode_with_hook(model, cache, final_token, hook)?;
    let (predicted, label_logits) = classify_logits(&logits, verbalizer)?;
    Ok(Classification {
        predicted,
        label_logits,
        receipt,
    })
}
