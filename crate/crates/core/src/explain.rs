//! Exact Shapley attribution over the specimen features.
//!
//! A coalition's value is the model output averaged over background rows,
//! with features inside the coalition taken from the explained point and
//! the rest from the background row. With three features all eight
//! coalitions are enumerated.

use std::io::Write;

use creepformer_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{NormStats, NormalizedSeries, Window, FEATURE_NAMES};
use crate::error::{Error, Result};
use crate::model::{BatchInput, BatchScope, SequenceRow, TataModel};

/// Largest background used by [`Explainer`].
pub const MAX_BACKGROUND: usize = 256;
/// Name recorded in exports for the sequence context used during
/// attribution: each sample keeps its own creep/time prefix.
pub const CONTEXT_POLICY: &str = "own_prefix";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapResult {
    /// Expected output over the background.
    pub phi0: f64,
    /// One attribution per feature, in input order.
    pub phi: Vec<f64>,
}

impl ShapResult {
    pub fn total(&self) -> f64 {
        self.phi0 + self.phi.iter().sum::<f64>()
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact Shapley values of `model_fn` at `x`. `model_fn` receives a batch of
/// feature rows and returns one output per row.
pub fn shapley<F>(mut model_fn: F, x: &[f64], background: &[Vec<f64>]) -> Result<ShapResult>
where
    F: FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
{
    let n = x.len();
    if background.is_empty() {
        return Err(Error::Input("Shapley background is empty".into()));
    }
    if n == 0 || n > 16 {
        return Err(Error::Input(format!("exact Shapley supports 1..=16 features, got {n}")));
    }
    if let Some(r) = background.iter().find(|r| r.len() != n) {
        return Err(Error::Input(format!("background row has {} features, expected {n}", r.len())));
    }
    let coalitions = 1usize << n;
    let mut rows = Vec::with_capacity(coalitions * background.len());
    for mask in 0..coalitions {
        for bg in background {
            rows.push((0..n).map(|j| if mask >> j & 1 == 1 { x[j] } else { bg[j] }).collect::<Vec<f64>>());
        }
    }
    let out = model_fn(&rows)?;
    if out.len() != rows.len() {
        return Err(Error::Input("model function returned the wrong number of outputs".into()));
    }
    if let Some(v) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("model output {v} during attribution")));
    }
    let value: Vec<f64> = out
        .chunks(background.len())
        .map(|c| c.iter().sum::<f64>() / background.len() as f64)
        .collect();
    let n_fact = factorial(n);
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        for mask in 0..coalitions {
            if mask >> i & 1 == 1 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let weight = factorial(s) * factorial(n - s - 1) / n_fact;
            *p += weight * (value[mask | 1 << i] - value[mask]);
        }
    }
    Ok(ShapResult { phi0: value[0], phi })
}

/// Attributions of one explained window.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAttribution {
    pub specimen_id: String,
    pub t: usize,
    /// Raw feature values (density, fc, E).
    pub features: [f64; 3],
    pub prediction: f64,
    pub shap: ShapResult,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureImportance {
    pub feature: &'static str,
    pub mean_abs_shap: f64,
    pub std: f64,
}

/// Attribution of a trained model's next-step prediction to the specimen
/// features, in normalized model-output units.
#[derive(Debug, Clone)]
pub struct Explainer<'a> {
    model: &'a TataModel,
    stats: &'a NormStats,
    /// Normalized background feature rows.
    background: Vec<Vec<f64>>,
}

impl<'a> Explainer<'a> {
    /// Uses the given raw feature rows as background, subsampled to at most
    /// [`MAX_BACKGROUND`] rows with `seed`.
    pub fn new(model: &'a TataModel, stats: &'a NormStats, raw_background: &[[f64; 3]], seed: u64) -> Result<Self> {
        if raw_background.is_empty() {
            return Err(Error::Input("Shapley background is empty".into()));
        }
        let mut rows = raw_background.to_vec();
        if rows.len() > MAX_BACKGROUND {
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            rows.truncate(MAX_BACKGROUND);
        }
        let background = rows.iter().map(|r| stats.normalize_features(r).to_vec()).collect();
        Ok(Self {
            model,
            stats,
            background,
        })
    }

    pub fn background_len(&self) -> usize {
        self.background.len()
    }

    /// Model output for each feature row, with the sequence prefix fixed.
    fn outputs(&self, creep: &[f64], time: &[f64], rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, false);
        // The context ignores features; any placeholder row works.
        let placeholder = vec![0.0; self.model.config().input_dim];
        let seq = [SequenceRow {
            creep,
            time,
            features: &placeholder,
        }];
        let ctx = self.model.context(&mut g, &p, &BatchInput::from_rows(&seq, None)?)?;
        let d = self.model.config().d_model;
        let ctx_vals = g.value(ctx).data().to_vec();
        let tiled: Vec<f64> = (0..rows.len()).flat_map(|_| ctx_vals.iter().copied()).collect();
        let ctx = g.constant(Tensor::new([rows.len(), d], tiled)?);
        let feats = g.constant(Tensor::new([rows.len(), 3], rows.concat())?);
        let y = self.model.head(&mut g, &p, ctx, feats, BatchScope::PerSample)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Attribution for a normalized prefix and raw features.
    pub fn explain_prefix(&self, creep: &[f64], time: &[f64], raw_features: &[f64; 3]) -> Result<(f64, ShapResult)> {
        let x = self.stats.normalize_features(raw_features).to_vec();
        let prediction = self.outputs(creep, time, std::slice::from_ref(&x))?[0];
        let shap = shapley(|rows| self.outputs(creep, time, rows), &x, &self.background)?;
        Ok((prediction, shap))
    }

    pub fn explain_windows(&self, series: &[NormalizedSeries], raw: &[[f64; 3]], windows: &[Window]) -> Result<Vec<SampleAttribution>> {
        windows
            .iter()
            .map(|w| {
                let s = &series[w.specimen];
                let row = s.row(w.t);
                let features = raw[w.specimen];
                let (prediction, shap) = self.explain_prefix(row.creep, row.time, &features)?;
                Ok(SampleAttribution {
                    specimen_id: s.id.clone(),
                    t: w.t,
                    features,
                    prediction,
                    shap,
                })
            })
            .collect()
    }
}

/// Mean |φ| per feature with its population standard deviation.
pub fn mean_abs_shap(samples: &[SampleAttribution]) -> Result<Vec<FeatureImportance>> {
    if samples.is_empty() {
        return Err(Error::Input("no attributions to summarize".into()));
    }
    let n = samples.len() as f64;
    Ok(FEATURE_NAMES
        .iter()
        .enumerate()
        .map(|(j, &feature)| {
            let vals: Vec<f64> = samples.iter().map(|s| s.shap.phi[j].abs()).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            FeatureImportance {
                feature,
                mean_abs_shap: mean,
                std,
            }
        })
        .collect())
}

pub fn write_importance_csv<W: Write>(w: W, rows: &[FeatureImportance]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(["feature", "mean_abs_shap", "std"])?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per (sample, feature), for beeswarm-style plots.
pub fn write_summary_csv<W: Write>(w: W, samples: &[SampleAttribution]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "sample",
        "specimen_id",
        "t",
        "feature",
        "shap_value",
        "feature_value",
        "phi0",
        "prediction",
        "context_policy",
    ])?;
    for (i, s) in samples.iter().enumerate() {
        for (j, name) in FEATURE_NAMES.iter().enumerate() {
            out.write_record([
                i.to_string(),
                s.specimen_id.clone(),
                s.t.to_string(),
                name.to_string(),
                s.shap.phi[j].to_string(),
                s.features[j].to_string(),
                s.shap.phi0.to_string(),
                s.prediction.to_string(),
                CONTEXT_POLICY.to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
