use creepformer_tensor::{numel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AblationSpec, TataConfig};

pub(crate) type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Uniform in ±sqrt(1/fan_in).
    Uniform { fan_in: usize },
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub(crate) init: Init,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct MhaIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncoderLayerIds {
    pub attn: MhaIds,
    pub ln1: NormIds,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln2: NormIds,
}

/// Feature-wise or batch attention path: projection, MHA, residual norm.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttentionPathIds {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub mha: MhaIds,
    pub ln: NormIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub creep_w: ParamId,
    pub creep_b: ParamId,
    pub time_w: ParamId,
    pub time_b: ParamId,
    pub main_w1: ParamId,
    pub main_b1: ParamId,
    pub main_ln1: NormIds,
    pub main_w2: ParamId,
    pub main_b2: ParamId,
    pub main_ln2: NormIds,
    pub feat: Option<AttentionPathIds>,
    pub batch: Option<AttentionPathIds>,
    pub integ_w: ParamId,
    pub integ_b: ParamId,
    pub integ_ln: NormIds,
    pub layers: Vec<EncoderLayerIds>,
    pub pool_attn: Option<ParamId>,
    pub hyb_w: ParamId,
    pub comb_w: ParamId,
    pub out_ln: NormIds,
    pub pred_w1: ParamId,
    pub pred_b1: ParamId,
    pub pred_w2: ParamId,
    pub pred_b2: ParamId,
}

struct Builder {
    specs: Vec<ParamSpec>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        });
        self.specs.len() - 1
    }

    /// Weight `[n_out, n_in]` plus bias `[n_out]`.
    fn linear(&mut self, prefix: &str, n_in: usize, n_out: usize) -> (ParamId, ParamId) {
        let w = self.add(format!("{prefix}.weight"), &[n_out, n_in], Init::Uniform { fan_in: n_in });
        let b = self.add(format!("{prefix}.bias"), &[n_out], Init::Uniform { fan_in: n_in });
        (w, b)
    }

    fn weight(&mut self, name: &str, n_in: usize, n_out: usize) -> ParamId {
        self.add(format!("{name}.weight"), &[n_out, n_in], Init::Uniform { fan_in: n_in })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormIds {
        NormIds {
            gamma: self.add(format!("{prefix}.gamma"), &[d], Init::Ones),
            beta: self.add(format!("{prefix}.beta"), &[d], Init::Zeros),
        }
    }

    fn mha(&mut self, prefix: &str, e: usize) -> MhaIds {
        let (wq, bq) = self.linear(&format!("{prefix}.q"), e, e);
        let (wk, bk) = self.linear(&format!("{prefix}.k"), e, e);
        let (wv, bv) = self.linear(&format!("{prefix}.v"), e, e);
        let (wo, bo) = self.linear(&format!("{prefix}.out"), e, e);
        MhaIds {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        }
    }
}

/// Width of the concatenated feature-path outputs entering the integration layer.
pub(crate) fn integration_width(cfg: &TataConfig, ab: &AblationSpec) -> usize {
    let mut w = cfg.hidden_dim;
    if ab.feature_attention {
        w += cfg.input_dim * cfg.feat_embed_dim;
    }
    if ab.batch_attention {
        w += cfg.feat_embed_dim;
    }
    w
}

pub(crate) fn build(cfg: &TataConfig, ab: &AblationSpec) -> (Layout, Vec<ParamSpec>) {
    let d = cfg.d_model;
    let h = cfg.hidden_dim;
    let fe = cfg.feat_embed_dim;
    let mut b = Builder { specs: Vec::new() };

    let (creep_w, creep_b) = b.linear("embed.creep", 1, d);
    let (time_w, time_b) = b.linear("embed.time", 1, d);

    let (main_w1, main_b1) = b.linear("features.main.fc1", cfg.input_dim, 2 * h);
    let main_ln1 = b.norm("features.main.norm1", 2 * h);
    let (main_w2, main_b2) = b.linear("features.main.fc2", 2 * h, h);
    let main_ln2 = b.norm("features.main.norm2", h);

    let feat = ab.feature_attention.then(|| {
        // One scalar→fe projection per feature: weight and bias are [input_dim, fe].
        let proj_w = b.add("features.feature_attn.proj.weight", &[cfg.input_dim, fe], Init::Uniform { fan_in: 1 });
        let proj_b = b.add("features.feature_attn.proj.bias", &[cfg.input_dim, fe], Init::Uniform { fan_in: 1 });
        AttentionPathIds {
            proj_w,
            proj_b,
            mha: b.mha("features.feature_attn.mha", fe),
            ln: b.norm("features.feature_attn.norm", fe),
        }
    });
    let batch = ab.batch_attention.then(|| {
        let (proj_w, proj_b) = b.linear("features.batch_attn.proj", cfg.input_dim, fe);
        AttentionPathIds {
            proj_w,
            proj_b,
            mha: b.mha("features.batch_attn.mha", fe),
            ln: b.norm("features.batch_attn.norm", fe),
        }
    });
    let (integ_w, integ_b) = b.linear("features.integrate", integration_width(cfg, ab), h);
    let integ_ln = b.norm("features.integrate.norm", h);

    let layers = (0..cfg.n_layers)
        .map(|l| {
            let p = format!("encoder.{l}");
            let attn = b.mha(&format!("{p}.attn"), d);
            let ln1 = b.norm(&format!("{p}.norm1"), d);
            let (w1, b1) = b.linear(&format!("{p}.ff1"), d, cfg.d_ff);
            let (w2, b2) = b.linear(&format!("{p}.ff2"), cfg.d_ff, d);
            let ln2 = b.norm(&format!("{p}.norm2"), d);
            EncoderLayerIds {
                attn,
                ln1,
                w1,
                b1,
                w2,
                b2,
                ln2,
            }
        })
        .collect();

    let pool_attn = ab.attn_pool.then(|| b.weight("pool.attn_score", d, 1));
    let hyb_w = b.weight("pool.hybrid", ab.n_pools() * d, d);
    let comb_w = b.weight("combine", d + h, d);
    let out_ln = b.norm("combine.norm", d);
    let (pred_w1, pred_b1) = b.linear("predictor.fc1", d, cfg.d_intermediate);
    let (pred_w2, pred_b2) = b.linear("predictor.fc2", cfg.d_intermediate, cfg.target_len);

    let layout = Layout {
        creep_w,
        creep_b,
        time_w,
        time_b,
        main_w1,
        main_b1,
        main_ln1,
        main_w2,
        main_b2,
        main_ln2,
        feat,
        batch,
        integ_w,
        integ_b,
        integ_ln,
        layers,
        pool_attn,
        hyb_w,
        comb_w,
        out_ln,
        pred_w1,
        pred_b1,
        pred_w2,
        pred_b2,
    };
    (layout, b.specs)
}

pub(crate) fn initialize(specs: &[ParamSpec], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    specs
        .iter()
        .map(|s| {
            let n = numel(&s.shape);
            let data = match s.init {
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
                Init::Uniform { fan_in } => {
                    let bound = (1.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            Tensor::new(s.shape.clone(), data).expect("spec shape")
        })
        .collect()
}
