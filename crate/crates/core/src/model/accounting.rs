//! Parameter and forward-pass FLOP counts derived from the architecture
//! configuration alone.
//!
//! FLOP conventions: a multiply-add is 2 FLOPs, so an affine map of `M` rows
//! costs `2·M·n_in·n_out` plus `M·n_out` for the bias. Elementwise adds,
//! scalings and activations cost 1 per element, softmax 5 per element and
//! layer norm 8 per element. Dropout is free (evaluation mode).

use serde::Serialize;

use super::layout;
use crate::config::{AblationSpec, TataConfig};

pub fn count_params(cfg: &TataConfig, ab: &AblationSpec) -> usize {
    let (_, specs) = layout::build(cfg, ab);
    specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsComponent {
    pub name: &'static str,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsTable {
    pub seq_len: usize,
    pub batch: usize,
    pub components: Vec<FlopsComponent>,
}

impl FlopsTable {
    pub fn total(&self) -> u64 {
        self.components.iter().map(|c| c.flops).sum()
    }

    pub fn get(&self, name: &str) -> Option<u64> {
        self.components.iter().find(|c| c.name == name).map(|c| c.flops)
    }

    /// Percentage of the total spent in component `name` (0 if absent).
    pub fn share(&self, name: &str) -> f64 {
        100.0 * self.get(name).unwrap_or(0) as f64 / self.total() as f64
    }
}

fn affine(rows: u64, n_in: u64, n_out: u64, bias: bool) -> u64 {
    2 * rows * n_in * n_out + if bias { rows * n_out } else { 0 }
}

fn layer_norm(elems: u64) -> u64 {
    8 * elems
}

/// Multi-head self-attention over `n` sequences of `len` tokens of width `e`.
fn mha(n: u64, len: u64, e: u64, heads: u64) -> u64 {
    let rows = n * len;
    let projections = 4 * affine(rows, e, e, true);
    let scale = rows * e;
    // Per head: scores len×len×dk, context len×len×dk; summed over heads gives e.
    let scores = 2 * n * len * len * e;
    let softmax = 5 * n * heads * len * len;
    let context = 2 * n * len * len * e;
    projections + scale + scores + softmax + context
}

/// Residual add plus layer norm after an attention block.
fn attention_path(n: u64, len: u64, e: u64, heads: u64) -> u64 {
    mha(n, len, e, heads) + n * len * e + layer_norm(n * len * e)
}

/// FLOPs of one evaluation-mode forward pass over `batch` sequences of
/// length `seq_len`, split by component.
pub fn count_flops(cfg: &TataConfig, ab: &AblationSpec, seq_len: usize, batch: usize) -> FlopsTable {
    let (t, b) = (seq_len as u64, batch as u64);
    let d = cfg.d_model as u64;
    let h = cfg.hidden_dim as u64;
    let fe = cfg.feat_embed_dim as u64;
    let nin = cfg.input_dim as u64;
    let dff = cfg.d_ff as u64;
    let di = cfg.d_intermediate as u64;
    let tokens = b * t;

    let mut feature = affine(b, nin, 2 * h, true) + b * 2 * h + layer_norm(b * 2 * h);
    feature += affine(b, 2 * h, h, true) + b * h + layer_norm(b * h);
    if ab.feature_attention {
        feature += 2 * b * nin * fe + attention_path(b, nin, fe, cfg.feat_heads as u64);
    }
    if ab.batch_attention {
        feature += affine(b, nin, fe, true) + attention_path(1, b, fe, cfg.batch_heads as u64);
    }
    let width = layout::integration_width(cfg, ab) as u64;
    feature += affine(b, width, h, true) + layer_norm(b * h) + b * h;

    // Two width-1 affines plus their sum.
    let embeddings = 2 * affine(tokens, 1, d, true) + tokens * d;
    let positional = tokens * d;

    let per_layer = attention_path(b, t, d, cfg.n_heads as u64)
        + affine(tokens, d, dff, true)
        + tokens * dff
        + affine(tokens, dff, d, true)
        + tokens * d
        + layer_norm(tokens * d);
    let encoder = cfg.n_layers as u64 * per_layer;

    let mut pooling = 0;
    if ab.mean_pool {
        pooling += 2 * tokens * d;
    }
    if ab.attn_pool {
        pooling += affine(tokens, d, 1, false) + 5 * tokens + 2 * tokens * d;
    }
    pooling += affine(b, ab.n_pools() as u64 * d, d, false) + b * d;

    let integration = affine(b, d + h, d, false) + b * d + layer_norm(b * d);
    let predictor = affine(b, d, di, true) + b * di + affine(b, di, cfg.target_len as u64, true);

    FlopsTable {
        seq_len,
        batch,
        components: vec![
            FlopsComponent { name: "feature_encoder", flops: feature },
            FlopsComponent { name: "embeddings", flops: embeddings },
            FlopsComponent { name: "positional_encoding", flops: positional },
            FlopsComponent { name: "encoder_layers", flops: encoder },
            FlopsComponent { name: "pooling", flops: pooling },
            FlopsComponent { name: "feature_integration", flops: integration },
            FlopsComponent { name: "predictor", flops: predictor },
        ],
    }
}
