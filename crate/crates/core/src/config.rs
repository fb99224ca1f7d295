//! Architecture, training and ablation settings, plus the flat key-value
//! config file that carries them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults are the tuned configuration:
/// `d_model = 192`, 4 layers, 4 heads, `d_ff = 768`, dropout 0.057.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TataConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Width of the feature encoder output.
    pub hidden_dim: usize,
    /// Per-feature projection width for the feature and batch attention paths.
    pub feat_embed_dim: usize,
    pub feat_heads: usize,
    pub batch_heads: usize,
    /// Hidden width of the two-layer predictor.
    pub d_intermediate: usize,
    pub target_len: usize,
    pub input_dim: usize,
    pub max_seq_len: usize,
    /// Count sinusoidal positions from 1 instead of 0.
    pub one_based_positions: bool,
}

impl Default for TataConfig {
    fn default() -> Self {
        Self {
            d_model: 192,
            n_layers: 4,
            n_heads: 4,
            d_ff: 768,
            dropout: 0.057,
            hidden_dim: 192,
            feat_embed_dim: 16,
            feat_heads: 4,
            batch_heads: 4,
            d_intermediate: 96,
            target_len: 1,
            input_dim: 3,
            max_seq_len: 160,
            one_based_positions: false,
        }
    }
}

impl TataConfig {
    /// A reduced configuration: `d_ff = 4·d_model`, `hidden_dim = d_model`,
    /// `d_intermediate = d_model / 2`, everything else default.
    pub fn reduced(d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
            hidden_dim: d_model,
            d_intermediate: (d_model / 2).max(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let extents = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("hidden_dim", self.hidden_dim),
            ("feat_embed_dim", self.feat_embed_dim),
            ("feat_heads", self.feat_heads),
            ("batch_heads", self.batch_heads),
            ("d_intermediate", self.d_intermediate),
            ("target_len", self.target_len),
            ("input_dim", self.input_dim),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{name} must be at least 1"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.d_ff != 4 * self.d_model {
            return fail(format!("d_ff must equal 4 * d_model = {}, got {}", 4 * self.d_model, self.d_ff));
        }
        if !self.feat_embed_dim.is_multiple_of(self.feat_heads) || !self.feat_embed_dim.is_multiple_of(self.batch_heads) {
            return fail(format!(
                "feat_embed_dim {} must be divisible by feat_heads {} and batch_heads {}",
                self.feat_embed_dim, self.feat_heads, self.batch_heads
            ));
        }
        if !(0.0..=0.3).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 0.3], got {}", self.dropout));
        }
        if self.target_len != 1 {
            return fail("only single-step prediction (target_len = 1) is supported".into());
        }
        Ok(())
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.00019,
            weight_decay: 5.55e-6,
            batch_size: 128,
            max_epochs: 40,
            plateau_factor: 0.5,
            plateau_patience: 5,
            early_stop_patience: 8,
            clip_norm: 1.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor)));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::Config("patience values must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("clip_norm must be positive and weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Which optional components of the architecture are present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub mean_pool: bool,
    pub attn_pool: bool,
    pub last_pool: bool,
    pub feature_attention: bool,
    pub batch_attention: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationSpec {
    pub fn full() -> Self {
        Self {
            mean_pool: true,
            attn_pool: true,
            last_pool: true,
            feature_attention: true,
            batch_attention: true,
        }
    }

    pub fn n_pools(&self) -> usize {
        [self.mean_pool, self.attn_pool, self.last_pool].iter().filter(|b| **b).count()
    }

    pub fn is_full(&self) -> bool {
        *self == Self::full()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pools() == 0 {
            return Err(Error::Config("at least one pooling method must remain enabled".into()));
        }
        Ok(())
    }
}

/// The six rows of the ablation report, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    WithoutMeanPooling,
    WithoutAttentionPooling,
    WithoutLastTokenPooling,
    WithoutFeatureAttention,
    WithoutBatchAttention,
    Proposed,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        Self::WithoutMeanPooling,
        Self::WithoutAttentionPooling,
        Self::WithoutLastTokenPooling,
        Self::WithoutFeatureAttention,
        Self::WithoutBatchAttention,
        Self::Proposed,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::WithoutMeanPooling => "w/o Mean pooling",
            Self::WithoutAttentionPooling => "w/o Attention pooling",
            Self::WithoutLastTokenPooling => "w/o Last Token pooling",
            Self::WithoutFeatureAttention => "w/o Feature attention",
            Self::WithoutBatchAttention => "w/o Batch attention",
            Self::Proposed => "Proposed Model",
        }
    }

    pub fn spec(self) -> AblationSpec {
        let mut s = AblationSpec::full();
        match self {
            Self::WithoutMeanPooling => s.mean_pool = false,
            Self::WithoutAttentionPooling => s.attn_pool = false,
            Self::WithoutLastTokenPooling => s.last_pool = false,
            Self::WithoutFeatureAttention => s.feature_attention = false,
            Self::WithoutBatchAttention => s.batch_attention = false,
            Self::Proposed => {}
        }
        s
    }
}

/// Contents of a config file: `key = value` lines using the field names of
/// [`TataConfig`] and [`TrainConfig`]. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub model: TataConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let known = toml::Table::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(k) = table.keys().find(|k| !known.contains_key(*k)) {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        TataConfig::default().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn head_divisibility_enforced() {
        let cfg = TataConfig {
            n_heads: 5,
            ..TataConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn d_ff_must_be_four_d_model() {
        let cfg = TataConfig {
            d_ff: 512,
            ..TataConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_file_round_trip_and_unknown_keys() {
        let cfg = RunConfig::parse("d_model = 64\nn_layers = 2\nd_ff = 256\nlr = 0.001\nseed = 7\n").unwrap();
        assert_eq!(cfg.model.d_model, 64);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.batch_size, 128);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert!(RunConfig::parse("d_modle = 64").is_err());
    }

    #[test]
    fn all_pools_off_is_rejected() {
        let s = AblationSpec {
            mean_pool: false,
            attn_pool: false,
            last_pool: false,
            ..AblationSpec::full()
        };
        assert!(s.validate().is_err());
    }
}
