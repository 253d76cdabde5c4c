//! Independent, cache-free forward pass in f64 used as an oracle for the
//! engine's prefill/decode path.

use cachetrap::config::{CacheDtype, ModelConfig, PosScheme};
use cachetrap::engine::{decode_step, prefill};
use cachetrap::kv_cache::CacheTensor;
use cachetrap::model::{build_synthetic_model, Model};
use cachetrap::rng::SplitMix64;

fn rms(x: &[f64], g: &[f32], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(g).map(|(v, g)| v * inv * *g as f64).collect()
}

fn mat(w: &[f32], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| *a as f64 * b).sum())
        .collect()
}

fn rope(v: &mut [f64], pos: usize) {
    let d = v.len();
    for i in 0..d / 2 {
        let theta = pos as f64 * 10000f64.powf(-((2 * i) as f64) / d as f64);
        let (s, c) = theta.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * c - b * s;
        v[2 * i + 1] = a * s + b * c;
    }
}

/// Next-token logits after `tokens`, full causal attention, no cache.
fn reference_logits(m: &Model, tokens: &[u32]) -> Vec<f64> {
    let c = &m.config;
    let (d, dm) = (c.head_dim, c.d_model);
    let eps = c.norm_eps as f64;
    let mut h: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| m.embed[t as usize * dm..(t as usize + 1) * dm].iter().map(|&x| x as f64).collect())
        .collect();
    for layer in &m.layers {
        let mut qs = Vec::new();
        let mut ks = Vec::new();
        let mut vs = Vec::new();
        for (pos, x) in h.iter().enumerate() {
            let n = rms(x, &layer.norm_attn, eps);
            let (mut q, mut k) = (mat(&layer.wq, &n), mat(&layer.wk, &n));
            if c.pos_scheme == PosScheme::Rotary {
                q.chunks_mut(d).for_each(|head| rope(head, pos));
                k.chunks_mut(d).for_each(|head| rope(head, pos));
            }
            qs.push(q);
            ks.push(k);
            vs.push(mat(&layer.wv, &n));
        }
        for pos in 0..h.len() {
            let mut attn = vec![0.0; c.n_heads * d];
            for qh in 0..c.n_heads {
                let kh = qh / (c.n_heads / c.n_kv_heads);
                let q = &qs[pos][qh * d..(qh + 1) * d];
                let scores: Vec<f64> = (0..=pos)
                    .map(|t| {
                        let k = &ks[t][kh * d..(kh + 1) * d];
                        q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = w.iter().sum();
                for (t, wt) in w.iter().enumerate() {
                    for j in 0..d {
                        attn[qh * d + j] += wt / z * vs[t][kh * d + j];
                    }
                }
            }
            let o = mat(&layer.wo, &attn);
            let x: Vec<f64> = h[pos].iter().zip(&o).map(|(a, b)| a + b).collect();
            let n = rms(&x, &layer.norm_mlp, eps);
            let up: Vec<f64> = mat(&layer.w_up, &n).into_iter().map(|u| u / (1.0 + (-u).exp())).collect();
            let down = mat(&layer.w_down, &up);
            h[pos] = x.iter().zip(&down).map(|(a, b)| a + b).collect();
        }
    }
    let last = rms(h.last().expect("non-empty"), &m.norm_final, eps);
    mat(&m.unembed, &last)
}

fn configs() -> Vec<ModelConfig> {
    let base = ModelConfig {
        cache_dtype: CacheDtype::Fp32,
        ..ModelConfig::tiny()
    };
    vec![
        base.clone(),
        ModelConfig {
            n_heads: 4,
            n_kv_heads: 2,
            d_model: 16,
            n_layers: 3,
            ..base.clone()
        },
        ModelConfig {
            pos_scheme: PosScheme::None,
            n_kv_heads: 1,
            ..base.clone()
        },
    ]
}

#[test]
fn decode_matches_reference_forward() {
    let mut rng = SplitMix64::new(5);
    for (i, cfg) in configs().into_iter().enumerate() {
        let model = build_synthetic_model(cfg.clone(), 20 + i as u64).unwrap();
        for _ in 0..8 {
            let len = 2 + rng.next_below(cfg.max_seq - 2);
            let tokens: Vec<u32> = (0..len).map(|_| rng.next_below(cfg.vocab_size) as u32).collect();
            let want = reference_logits(&model, &tokens);
            let cache = prefill(&model, &tokens[..len - 1]).unwrap().cache;
            let got = decode_step(&model, &cache, tokens[len - 1]).unwrap();
            let via_prefill = prefill(&model, &tokens).unwrap().logits;
            for (k, w) in want.iter().enumerate() {
                assert!((got[k] as f64 - w).abs() < 1e-4, "config {i} logit {k}: {} vs {w}", got[k]);
                assert!((via_prefill[k] as f64 - w).abs() < 1e-4, "config {i} prefill logit {k}");
            }
        }
    }
}

#[test]
fn fp16_cache_stays_close_to_reference() {
    let model = build_synthetic_model(ModelConfig::tiny(), 9).unwrap();
    let tokens = [4, 8, 15, 0, 2, 3];
    let want = reference_logits(&model, &tokens);
    let cache = prefill(&model, &tokens[..5]).unwrap().cache;
    let got = decode_step(&model, &cache, tokens[5]).unwrap();
    for (g, w) in got.iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-2, "{g} vs {w}");
    }
}

/// Layer-0 cached values are W_v applied to the normed embedding.
#[test]
fn cached_values_are_wv_projections() {
    let cfg = ModelConfig {
        cache_dtype: CacheDtype::Fp32,
        ..ModelConfig::tiny()
    };
    let model = build_synthetic_model(cfg.clone(), 31).unwrap();
    let tokens = [1u32, 7, 3, 12];
    let cache = prefill(&model, &tokens).unwrap().cache;
    let layer = &model.layers[0];
    for (t, &tok) in tokens.iter().enumerate() {
        let dm = cfg.d_model;
        let x: Vec<f64> = model.embed[tok as usize * dm..(tok as usize + 1) * dm]
            .iter()
            .map(|&v| v as f64)
            .collect();
        let v = mat(&layer.wv, &rms(&x, &layer.norm_attn, cfg.norm_eps as f64));
        for h in 0..cfg.n_kv_heads {
            for j in 0..cfg.head_dim {
                let cached = cache.read_value(0, CacheTensor::V, h, t, j).unwrap() as f64;
                assert!((cached - v[h * cfg.head_dim + j]).abs() < 1e-6, "t{t} h{h} j{j}");
            }
        }
    }
}
