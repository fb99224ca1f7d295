//! The triple-attention transformer: sequence embedding with sinusoidal
//! positions, a three-path feature encoder (main MLP, feature-wise attention,
//! batch attention), stacked masked self-attention layers, hybrid pooling and
//! a two-layer predictor.

mod accounting;
mod layout;

use creepformer_tensor::{Graph, Tensor, Var};

use crate::config::{AblationSpec, TataConfig};
use crate::error::{Error, Result};
use layout::{AttentionPathIds, Layout, MhaIds, NormIds};

pub use accounting::{count_flops, count_params, FlopsComponent, FlopsTable};
pub use layout::ParamSpec;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Padded mini-batch of creep histories.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    /// `[B, T]` normalized creep (microstrain / α), zero at padding.
    pub creep_hist: Tensor,
    /// `[B, T]` ln(1 + day), zero at padding.
    pub time_hist: Tensor,
    /// `[B, input_dim]` z-scored (density, fc, E).
    pub features: Tensor,
    /// `[B, T]` with 1 at padding.
    pub pad_mask: Tensor,
    pub lengths: Vec<usize>,
}

/// One unpadded sequence for [`BatchInput::from_rows`].
#[derive(Debug, Clone, Copy)]
pub struct SequenceRow<'a> {
    pub creep: &'a [f64],
    pub time: &'a [f64],
    pub features: &'a [f64],
}

impl BatchInput {
    /// Pads rows to the longest sequence (or `pad_to`, if larger).
    pub fn from_rows(rows: &[SequenceRow<'_>], pad_to: Option<usize>) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let n_feat = first.features.len();
        let longest = rows.iter().map(|r| r.creep.len()).max().unwrap_or(0);
        let t = pad_to.unwrap_or(0).max(longest);
        let b = rows.len();
        let mut creep = vec![0.0; b * t];
        let mut time = vec![0.0; b * t];
        let mut mask = vec![1.0; b * t];
        let mut feats = Vec::with_capacity(b * n_feat);
        let mut lengths = Vec::with_capacity(b);
        for (i, r) in rows.iter().enumerate() {
            let l = r.creep.len();
            if l == 0 || r.time.len() != l {
                return Err(Error::Input(format!(
                    "row {i}: creep length {l} and time length {} must match and be nonzero",
                    r.time.len()
                )));
            }
            if r.features.len() != n_feat {
                return Err(Error::Input(format!("row {i}: expected {n_feat} features")));
            }
            creep[i * t..i * t + l].copy_from_slice(r.creep);
            time[i * t..i * t + l].copy_from_slice(r.time);
            mask[i * t..i * t + l].iter_mut().for_each(|m| *m = 0.0);
            feats.extend_from_slice(r.features);
            lengths.push(l);
        }
        Ok(Self {
            creep_hist: Tensor::new([b, t], creep)?,
            time_hist: Tensor::new([b, t], time)?,
            features: Tensor::new([b, n_feat], feats)?,
            pad_mask: Tensor::new([b, t], mask)?,
            lengths,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn seq_len(&self) -> usize {
        self.creep_hist.shape()[1]
    }

    fn check(&self) -> Result<()> {
        let (b, t) = (self.batch_size(), self.seq_len());
        if b == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        for (name, x) in [("creep_hist", &self.creep_hist), ("time_hist", &self.time_hist), ("pad_mask", &self.pad_mask)] {
            if x.shape() != [b, t] {
                return Err(Error::Input(format!("{name} has shape {:?}, expected [{b}, {t}]", x.shape())));
            }
        }
        for (i, &l) in self.lengths.iter().enumerate() {
            if l == 0 || l > t {
                return Err(Error::Input(format!("length {l} of row {i} outside 1..={t}")));
            }
            let row = &self.pad_mask.data()[i * t..(i + 1) * t];
            if row.iter().enumerate().any(|(k, &m)| (m > 0.5) != (k >= l)) {
                return Err(Error::Input(format!("pad_mask row {i} disagrees with length {l}")));
            }
        }
        Ok(())
    }
}

/// Sinusoidal table `[T, d]`: `sin(pos / 10000^(2i/d))` at even dims and the
/// matching cosine at odd dims.
pub fn positional_encoding(t: usize, d: usize, one_based: bool) -> Tensor {
    let mut pe = vec![0.0; t * d];
    let base = if one_based { 1.0 } else { 0.0 };
    for p in 0..t {
        let pos = p as f64 + base;
        for i in (0..d).step_by(2) {
            let angle = pos / 10000f64.powf(i as f64 / d as f64);
            pe[p * d + i] = angle.sin();
            if i + 1 < d {
                pe[p * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new([t, d], pe).expect("shape")
}

/// Key-validity mask `[B, T, T]`: entry `(i, j, k)` is 1 iff key `k` is
/// padding for sequence `i` (`k >= lengths[i]`), for every query `j`.
pub fn build_attention_mask(lengths: &[usize], b: usize, t: usize) -> Result<Tensor> {
    if lengths.len() != b {
        return Err(Error::Input(format!("{} lengths for batch of {b}", lengths.len())));
    }
    let mut m = vec![0.0; b * t * t];
    for (i, &l) in lengths.iter().enumerate() {
        if l == 0 || l > t {
            return Err(Error::Input(format!("length {l} outside 1..={t}")));
        }
        for j in 0..t {
            for k in l..t {
                m[(i * t + j) * t + k] = 1.0;
            }
        }
    }
    Ok(Tensor::new([b, t, t], m)?)
}

/// Which rows the batch-attention path lets attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchScope {
    /// All rows of the batch form one token sequence (training).
    #[default]
    Joint,
    /// Every row attends only to itself, exactly as if run with B = 1.
    PerSample,
}

/// Parameter handles for one forward pass.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, id: usize) -> Var {
        self.vars[id]
    }
}

/// Output and attention probabilities of a multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub out: Var,
    /// `[N, H, L, L]`
    pub weights: Var,
}

/// Hybrid pooling result with its ingredients.
#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    pub hybrid: Var,
    pub mean: Option<Var>,
    pub attn: Option<Var>,
    pub last: Option<Var>,
    /// `[B, T]` attention-pool weights.
    pub attn_weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct TataModel {
    config: TataConfig,
    ablation: AblationSpec,
    layout: Layout,
    specs: Vec<ParamSpec>,
    params: Vec<Tensor>,
}

impl TataModel {
    pub fn new(config: TataConfig, ablation: AblationSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        ablation.validate()?;
        let (layout, specs) = layout::build(&config, &ablation);
        let params = layout::initialize(&specs, seed);
        Ok(Self {
            config,
            ablation,
            layout,
            specs,
            params,
        })
    }

    /// Rebuilds a model from named tensors; names and shapes must match the
    /// layout implied by `config` and `ablation` exactly.
    pub fn from_named(config: TataConfig, ablation: AblationSpec, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, ablation, 0)?;
        if named.len() != model.specs.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.specs.len(),
                named.len()
            )));
        }
        for (slot, ((name, t), spec)) in model.params.iter_mut().zip(named.into_iter().zip(&model.specs)) {
            if name != spec.name || t.shape() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    spec.name,
                    spec.shape
                )));
            }
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!("tensor {name} holds non-finite values")));
            }
            *slot = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &TataConfig {
        &self.config
    }

    pub fn ablation(&self) -> &AblationSpec {
        &self.ablation
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.specs.iter().position(|s| s.name == name).map(|i| &mut self.params[i])
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `g`, as learnable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { vars }
    }

    /// `(W_creep x + b_creep) + (W_time τ + b_time)` per position, `[B, T, d]`.
    pub fn embed_sequence(&self, g: &mut Graph, p: &Bound, creep: Var, time: Var) -> Result<Var> {
        let cs = g.shape(creep).to_vec();
        if cs.len() != 2 || g.shape(time) != cs.as_slice() {
            return Err(Error::Input(format!(
                "creep {:?} and time {:?} must both be [B, T]",
                cs,
                g.shape(time)
            )));
        }
        let l = &self.layout;
        let c = g.reshape(creep, &[cs[0], cs[1], 1])?;
        let t = g.reshape(time, &[cs[0], cs[1], 1])?;
        let ec = g.affine(c, p.get(l.creep_w), Some(p.get(l.creep_b)))?;
        let et = g.affine(t, p.get(l.time_w), Some(p.get(l.time_b)))?;
        Ok(g.add(ec, et)?)
    }

    fn layer_norm(&self, g: &mut Graph, p: &Bound, x: Var, ids: NormIds) -> Result<Var> {
        Ok(g.layer_norm(x, p.get(ids.gamma), p.get(ids.beta), LAYER_NORM_EPS)?)
    }

    /// Multi-head scaled dot-product attention over the middle axis of
    /// `x: [N, L, E]`. `mask` (1 = invalid key) must broadcast to `[N, H, L, L]`.
    fn multi_head_attention(
        &self,
        g: &mut Graph,
        p: &Bound,
        ids: &MhaIds,
        x: Var,
        heads: usize,
        mask: Option<&Tensor>,
    ) -> Result<Attention> {
        let s = g.shape(x).to_vec();
        let (n, len, e) = (s[0], s[1], s[2]);
        let dk = e / heads;
        let split = |g: &mut Graph, w, b| -> Result<Var> {
            let y = g.affine(x, p.get(w), Some(p.get(b)))?;
            let y = g.reshape(y, &[n, len, heads, dk])?;
            Ok(g.permute(y, &[0, 2, 1, 3])?)
        };
        let q = split(g, ids.wq, ids.bq)?;
        let k = split(g, ids.wk, ids.bk)?;
        let v = split(g, ids.wv, ids.bv)?;
        let q = g.scale(q, 1.0 / (dk as f64).sqrt());
        let scores = g.matmul_nt(q, k)?;
        let weights = g.masked_softmax(scores, mask)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[n, len, e])?;
        let out = g.affine(ctx, p.get(ids.wo), Some(p.get(ids.bo)))?;
        Ok(Attention { out, weights })
    }

    fn attention_path(&self, g: &mut Graph, p: &Bound, ids: &AttentionPathIds, tokens: Var, heads: usize) -> Result<Var> {
        let a = self.multi_head_attention(g, p, &ids.mha, tokens, heads, None)?;
        let r = g.add(a.out, tokens)?;
        self.layer_norm(g, p, r, ids.ln)
    }

    /// Three-path feature encoder, `[B, input_dim] → [B, hidden_dim]`.
    pub fn encode_features(&self, g: &mut Graph, p: &Bound, features: Var, scope: BatchScope) -> Result<Var> {
        let cfg = &self.config;
        let l = &self.layout;
        let fs = g.shape(features).to_vec();
        if fs.len() != 2 || fs[1] != cfg.input_dim {
            return Err(Error::Input(format!("features {:?}, expected [B, {}]", fs, cfg.input_dim)));
        }
        let b = fs[0];
        if b == 0 {
            return Err(Error::Input("empty feature batch".into()));
        }
        let fe = cfg.feat_embed_dim;

        let h = g.affine(features, p.get(l.main_w1), Some(p.get(l.main_b1)))?;
        let h = g.relu(h);
        let h = self.layer_norm(g, p, h, l.main_ln1)?;
        let h = g.affine(h, p.get(l.main_w2), Some(p.get(l.main_b2)))?;
        let h = g.relu(h);
        let main = self.layer_norm(g, p, h, l.main_ln2)?;
        let mut parts = vec![main];

        if let Some(ids) = &l.feat {
            // Each scalar feature becomes a fe-dim token: x_i * w_i + b_i.
            let col = g.reshape(features, &[b, cfg.input_dim, 1])?;
            let scaled = g.mul(col, p.get(ids.proj_w))?;
            let tokens = g.add(scaled, p.get(ids.proj_b))?;
            let out = self.attention_path(g, p, ids, tokens, cfg.feat_heads)?;
            parts.push(g.reshape(out, &[b, cfg.input_dim * fe])?);
        }
        if let Some(ids) = &l.batch {
            // The batch itself is the token sequence.
            let proj = g.affine(features, p.get(ids.proj_w), Some(p.get(ids.proj_b)))?;
            let tokens = match scope {
                BatchScope::Joint => g.reshape(proj, &[1, b, fe])?,
                BatchScope::PerSample => g.reshape(proj, &[b, 1, fe])?,
            };
            let out = self.attention_path(g, p, ids, tokens, cfg.batch_heads)?;
            parts.push(g.reshape(out, &[b, fe])?);
        }
        let combined = g.concat(&parts, 1)?;
        let z = g.affine(combined, p.get(l.integ_w), Some(p.get(l.integ_b)))?;
        let z = self.layer_norm(g, p, z, l.integ_ln)?;
        Ok(g.relu(z))
    }

    /// Masked multi-head self-attention of encoder layer `layer`.
    /// `mask` is the `[B, T, T]` tensor from [`build_attention_mask`].
    pub fn self_attention(&self, g: &mut Graph, p: &Bound, layer: usize, x: Var, mask: &Tensor) -> Result<Attention> {
        let ids = self
            .layout
            .layers
            .get(layer)
            .ok_or_else(|| Error::Input(format!("no encoder layer {layer}")))?;
        let ms = mask.shape();
        let mask4 = mask.clone().reshape([ms[0], 1, ms[1], ms[2]])?;
        self.multi_head_attention(g, p, &ids.attn, x, self.config.n_heads, Some(&mask4))
    }

    /// `x' = LN(x + MHA(x))`, then `LN(x' + Dropout(W2 ReLU(W1 x' + b1) + b2))`.
    pub fn encoder_layer(&self, g: &mut Graph, p: &Bound, layer: usize, x: Var, mask: &Tensor) -> Result<Var> {
        let ids = self.layout.layers[layer];
        let a = self.self_attention(g, p, layer, x, mask)?;
        let r = g.add(x, a.out)?;
        let x1 = self.layer_norm(g, p, r, ids.ln1)?;
        let f = g.affine(x1, p.get(ids.w1), Some(p.get(ids.b1)))?;
        let f = g.relu(f);
        let f = g.affine(f, p.get(ids.w2), Some(p.get(ids.b2)))?;
        let f = g.dropout(f, self.config.dropout)?;
        let r = g.add(x1, f)?;
        self.layer_norm(g, p, r, ids.ln2)
    }

    /// Embedding, positional encoding and every encoder layer: `[B, T, d]`.
    pub fn encode_sequence(&self, g: &mut Graph, p: &Bound, batch: &BatchInput) -> Result<Var> {
        batch.check()?;
        let (b, t) = (batch.batch_size(), batch.seq_len());
        if t > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {t} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let creep = g.constant(batch.creep_hist.clone());
        let time = g.constant(batch.time_hist.clone());
        let e = self.embed_sequence(g, p, creep, time)?;
        let pe = g.constant(positional_encoding(t, self.config.d_model, self.config.one_based_positions));
        let mut x = g.add(e, pe)?;
        let mask = build_attention_mask(&batch.lengths, b, t)?;
        for layer in 0..self.config.n_layers {
            x = self.encoder_layer(g, p, layer, x, &mask)?;
        }
        Ok(x)
    }

    /// Mean, attention and last-valid-token pooling fused by `tanh(W_hyb [..])`.
    pub fn hybrid_pool(&self, g: &mut Graph, p: &Bound, enc: Var, batch: &BatchInput) -> Result<Pooled> {
        let s = g.shape(enc).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        if batch.batch_size() != b || batch.seq_len() != t {
            return Err(Error::Input("pooling batch does not match encoder output".into()));
        }
        if batch.lengths.iter().any(|&l| l == 0 || l > t) {
            return Err(Error::Input("pooling needs at least one valid token per row".into()));
        }
        let mut parts = Vec::with_capacity(3);
        let mut out = Pooled {
            hybrid: enc,
            mean: None,
            attn: None,
            last: None,
            attn_weights: None,
        };
        if self.ablation.mean_pool {
            let mut w = vec![0.0; b * t];
            for (i, &l) in batch.lengths.iter().enumerate() {
                w[i * t..i * t + l].iter_mut().for_each(|v| *v = 1.0 / l as f64);
            }
            let w = g.constant(Tensor::new([b, 1, t], w)?);
            let m = g.matmul(w, enc)?;
            let m = g.reshape(m, &[b, d])?;
            out.mean = Some(m);
            parts.push(m);
        }
        if let Some(w_attn) = self.layout.pool_attn {
            let scores = g.affine(enc, p.get(w_attn), None)?;
            let scores = g.reshape(scores, &[b, t])?;
            let alpha = g.masked_softmax(scores, Some(&batch.pad_mask))?;
            let a3 = g.reshape(alpha, &[b, 1, t])?;
            let c = g.matmul(a3, enc)?;
            let c = g.reshape(c, &[b, d])?;
            out.attn = Some(c);
            out.attn_weights = Some(alpha);
            parts.push(c);
        }
        if self.ablation.last_pool {
            let idx: Vec<usize> = batch.lengths.iter().map(|l| l - 1).collect();
            let c = g.select(enc, &idx)?;
            out.last = Some(c);
            parts.push(c);
        }
        let cat = g.concat(&parts, 1)?;
        let z = g.affine(cat, p.get(self.layout.hyb_w), None)?;
        out.hybrid = g.tanh(z);
        Ok(out)
    }

    /// Sequence context `c_hybrid`, `[B, d]`. Independent of the features.
    pub fn context(&self, g: &mut Graph, p: &Bound, batch: &BatchInput) -> Result<Var> {
        let enc = self.encode_sequence(g, p, batch)?;
        Ok(self.hybrid_pool(g, p, enc, batch)?.hybrid)
    }

    /// Feature encoding, fusion with the context and the predictor: `[B, target_len]`.
    pub fn head(&self, g: &mut Graph, p: &Bound, context: Var, features: Var, scope: BatchScope) -> Result<Var> {
        let l = &self.layout;
        let f = self.encode_features(g, p, features, scope)?;
        let cat = g.concat(&[context, f], 1)?;
        let h = g.affine(cat, p.get(l.comb_w), None)?;
        let h = g.tanh(h);
        let h = self.layer_norm(g, p, h, l.out_ln)?;
        let z = g.affine(h, p.get(l.pred_w1), Some(p.get(l.pred_b1)))?;
        let z = g.dropout(z, self.config.dropout)?;
        let z = g.relu(z);
        Ok(g.affine(z, p.get(l.pred_w2), Some(p.get(l.pred_b2)))?)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &BatchInput, scope: BatchScope) -> Result<Var> {
        let ctx = self.context(g, p, batch)?;
        let features = g.constant(batch.features.clone());
        self.head(g, p, ctx, features, scope)
    }

    /// Evaluation-mode predictions, one per row, each computed as if the row
    /// were alone in its batch.
    pub fn predict(&self, batch: &BatchInput) -> Result<Vec<f64>> {
        self.predict_scoped(batch, BatchScope::PerSample)
    }

    pub fn predict_scoped(&self, batch: &BatchInput, scope: BatchScope) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let y = self.forward(&mut g, &p, batch, scope)?;
        Ok(g.value(y).data().to_vec())
    }
}
