//! LLaMA-style decoder-only transformer parameters.
//!
//! Each block holds an attention RMSNorm gain, `Wq Wk Wv Wo`, an FFN RMSNorm gain and
//! a SwiGLU feed-forward (`W_gate W_up W_down`). Positions are encoded with rotary
//! embeddings, so there is no positional parameter. Weights are stored `in × out`
//! (`y = x·W`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::spectral::{LayerRole, WeightMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// FFN hidden width as a multiple of `d_model`.
    pub ffn_mult: f64,
    pub context: usize,
    pub seed: u64,
    pub tie_output_head: bool,
    /// Standard deviation of the normal initialisation.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4.0,
            context: 64,
            seed: 0,
            tie_output_head: false,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.vocab == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return bad("vocab, d_model, n_layers and n_heads must be positive");
        }
        if self.context == 0 {
            return bad("context must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return bad("d_model must be divisible by n_heads");
        }
        if self.head_dim() % 2 != 0 {
            return bad("head dimension must be even for rotary embeddings");
        }
        if !(self.ffn_mult > 0.0) || self.hidden() == 0 {
            return bad("ffn_mult must give a positive hidden width");
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn hidden(&self) -> usize {
        (self.ffn_mult * self.d_model as f64).round() as usize
    }
}

/// Parameter indices of one transformer block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockIdx {
    pub att_norm: usize,
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
    pub ffn_norm: usize,
    pub gate: usize,
    pub up: usize,
    pub down: usize,
}

const PER_BLOCK: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    /// All parameters; 1-D ones carry [`LayerRole::NonMatrix`].
    pub params: Vec<WeightMatrix>,
}

impl Model {
    pub(crate) const EMBED: usize = 0;

    pub(crate) fn block(&self, b: usize) -> BlockIdx {
        let base = 1 + PER_BLOCK * b;
        BlockIdx {
            att_norm: base,
            q: base + 1,
            k: base + 2,
            v: base + 3,
            o: base + 4,
            ffn_norm: base + 5,
            gate: base + 6,
            up: base + 7,
            down: base + 8,
        }
    }

    pub(crate) fn final_norm(&self) -> usize {
        1 + PER_BLOCK * self.cfg.n_layers
    }

    /// Index of the output head, `None` when tied to the embedding.
    pub(crate) fn head(&self) -> Option<usize> {
        (!self.cfg.tie_output_head).then(|| 2 + PER_BLOCK * self.cfg.n_layers)
    }

    /// `(name, role)` of every matrix parameter, in parameter order.
    pub fn matrix_layers(&self) -> Vec<(String, LayerRole)> {
        self.params
            .iter()
            .filter(|p| p.role.is_matrix())
            .map(|p| (p.name.clone(), p.role))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(WeightMatrix::len).sum()
    }
}

/// Deterministically initialised model.
///
/// Matrices are drawn from `N(0, init_std²)`, with the residual projections (`Wo`,
/// `W_down`) additionally scaled by `1/sqrt(2·n_layers)`. Norm gains start at one.
pub fn build_model(cfg: &ModelConfig) -> Result<Model, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, h, v) = (cfg.d_model, cfg.hidden(), cfg.vocab);
    let residual_std = cfg.init_std / (2.0 * cfg.n_layers as f64).sqrt();
    let mut normal = |name: String, role, rows, cols, std: f64| {
        let dist = Normal::new(0.0, std).expect("positive std");
        let values = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
        WeightMatrix::new(name, role, rows, cols, values).expect("shape")
    };
    let ones = |name: String| WeightMatrix::vector(name, vec![1.0; d]).expect("shape");

    let mut params = vec![normal("embed".into(), LayerRole::Embedding, v, d, cfg.init_std)];
    for b in 0..cfg.n_layers {
        let p = |s: &str| format!("blocks.{b}.{s}");
        params.push(ones(p("att_norm")));
        params.push(normal(p("att.q"), LayerRole::AttQ, d, d, cfg.init_std));
        params.push(normal(p("att.k"), LayerRole::AttK, d, d, cfg.init_std));
        params.push(normal(p("att.v"), LayerRole::AttV, d, d, cfg.init_std));
        params.push(normal(p("att.o"), LayerRole::AttO, d, d, residual_std));
        params.push(ones(p("ffn_norm")));
        params.push(normal(p("ffn.gate"), LayerRole::FfnGate, d, h, cfg.init_std));
        params.push(normal(p("ffn.up"), LayerRole::FfnUp, d, h, cfg.init_std));
        params.push(normal(p("ffn.down"), LayerRole::FfnDown, h, d, residual_std));
    }
    params.push(ones("final_norm".into()));
    if !cfg.tie_output_head {
        params.push(normal("output_head".into(), LayerRole::OutputHead, d, v, cfg.init_std));
    }
    Ok(Model { cfg: *cfg, params })
}
