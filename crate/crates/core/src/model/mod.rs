//! Model weights and constructors.
//!
//! Matrices are row-major `[out, in]` and applied as `y = W x`.

mod demo;
mod io;

pub use demo::{build_trojan_demo_model, TargetChannel, TrojanDemo};
pub use io::{load_model, save_model};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub norm_attn: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub norm_mlp: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub norm_final: Vec<f32>,
    pub unembed: Vec<f32>,
}

/// Canonical tensor names and shapes for `cfg`, in file order.
pub fn tensor_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let q = cfg.n_heads * cfg.head_dim;
    let kv = cfg.kv_dim();
    let mut out = vec![("embed".to_string(), vec![cfg.vocab_size, d])];
    for i in 0..cfg.n_layers {
        out.push((format!("layers.{i}.norm_attn"), vec![d]));
        out.push((format!("layers.{i}.wq"), vec![q, d]));
        out.push((format!("layers.{i}.wk"), vec![kv, d]));
        out.push((format!("layers.{i}.wv"), vec![kv, d]));
        out.push((format!("layers.{i}.wo"), vec![d, q]));
        out.push((format!("layers.{i}.norm_mlp"), vec![d]));
        out.push((format!("layers.{i}.w_up"), vec![cfg.ffn_dim, d]));
        out.push((format!("layers.{i}.w_down"), vec![d, cfg.ffn_dim]));
    }
    out.push(("norm_final".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![cfg.vocab_size, d]));
    out
}

impl Model {
    /// All-zero weights with unit norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let q = config.n_heads * config.head_dim;
        let kv = config.kv_dim();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                norm_attn: vec![1.0; d],
                wq: vec![0.0; q * d],
                wk: vec![0.0; kv * d],
                wv: vec![0.0; kv * d],
                wo: vec![0.0; d * q],
                norm_mlp: vec![1.0; d],
                w_up: vec![0.0; config.ffn_dim * d],
                w_down: vec![0.0; d * config.ffn_dim],
            })
            .collect();
        Ok(Self {
            embed: vec![0.0; config.vocab_size * d],
            norm_final: vec![1.0; d],
            unembed: vec![0.0; config.vocab_size * d],
            layers,
            config,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.tensor_ref(name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Vec<f32>> {
        match name {
            "embed" => return Some(&mut self.embed),
            "norm_final" => return Some(&mut self.norm_final),
            "unembed" => return Some(&mut self.unembed),
            _ => {}
        }
        let (idx, field) = parse_layer_name(name)?;
        let layer = self.layers.get_mut(idx)?;
        Some(match field {
            "norm_attn" => &mut layer.norm_attn,
            "wq" => &mut layer.wq,
            "wk" => &mut layer.wk,
            "wv" => &mut layer.wv,
            "wo" => &mut layer.wo,
            "norm_mlp" => &mut layer.norm_mlp,
            "w_up" => &mut layer.w_up,
            "w_down" => &mut layer.w_down,
            _ => return None,
        })
    }

    fn tensor_ref(&self, name: &str) -> Option<&[f32]> {
        match name {
            "embed" => return Some(&self.embed),
            "norm_final" => return Some(&self.norm_final),
            "unembed" => return Some(&self.unembed),
            _ => {}
        }
        let (idx, field) = parse_layer_name(name)?;
        let layer = self.layers.get(idx)?;
        Some(match field {
            "norm_attn" => &layer.norm_attn,
            "wq" => &layer.wq,
            "wk" => &layer.wk,
            "wv" => &layer.wv,
            "wo" => &layer.wo,
            "norm_mlp" => &layer.norm_mlp,
            "w_up" => &layer.w_up,
            "w_down" => &layer.w_down,
            _ => return None,
        })
    }

    /// Checks every tensor's length against the config and that all entries are finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Config(format!(
                "model has {} layers, config says {}",
                self.layers.len(),
                self.config.n_layers
            )));
        }
        for (name, shape) in tensor_shapes(&self.config) {
            let data = self.tensor_ref(&name).expect("canonical name");
            let expected: usize = shape.iter().product();
            if data.len() != expected {
                return Err(Error::Config(format!(
                    "tensor {name} has {} entries, expected {expected}",
                    data.len()
                )));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("tensor {name} has a non-finite entry")));
            }
        }
        Ok(())
    }
}

fn parse_layer_name(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("layers.")?;
    let (idx, field) = rest.split_once('.')?;
    Some((idx.parse().ok()?, field))
}

/// Deterministic random model: every matrix entry uniform in `[-s, s]` with
/// `s = sqrt(1 / d_model)`, norm gains fixed at 1. Tensors are filled in
/// canonical order from one SplitMix64 stream seeded with `seed`.
pub fn build_synthetic_model(config: ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::zeros(config)?;
    let scale = (1.0 / model.config.d_model as f32).sqrt();
    let mut rng = SplitMix64::new(seed);
    for (name, _) in tensor_shapes(&model.config) {
        if name.ends_with("norm_attn") || name.ends_with("norm_mlp") || name == "norm_final" {
            continue;
        }
        let data = model.tensor_mut(&name).expect("canonical name");
        for v in data.iter_mut() {
            *v = rng.next_symmetric_f32(scale);
        }
    }
    Ok(model)
}
