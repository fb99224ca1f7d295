//! Mini-batch training with AdamW, plateau decay, early stopping and
//! best-weight retention, plus the ablation harness.

mod optim;

use std::io::Write;

use creepformer_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{AblationVariant, TataConfig, TrainConfig};
use crate::data::{NormalizedSeries, PreparedData, Window};
use crate::error::{Error, Result};
use crate::infer::{mape, predict_windows};
use crate::model::{count_params, BatchInput, BatchScope, SequenceRow, TataModel};

pub use optim::{clip_gradients, mse_loss, AdamW, EarlyStopping, PlateauScheduler};

/// Batches per length-sorted pool when forming mini-batches.
const POOL_BATCHES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mape: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Shuffled mini-batches of windows with similar prefix lengths: windows are
/// shuffled, cut into pools of `POOL_BATCHES` batches, sorted by length
/// within each pool, batched, and the batch order shuffled again. Padding
/// stays small while every epoch still sees a fresh random grouping.
pub fn length_bucketed_batches(windows: &[Window], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<Window>> {
    let mut all = windows.to_vec();
    all.shuffle(rng);
    let mut batches = Vec::with_capacity(all.len().div_ceil(batch_size.max(1)));
    for pool in all.chunks_mut(batch_size.max(1) * POOL_BATCHES) {
        pool.sort_by_key(|w| w.t);
        batches.extend(pool.chunks(batch_size.max(1)).map(<[Window]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

fn batch_input(series: &[NormalizedSeries], batch: &[Window]) -> Result<(BatchInput, Tensor)> {
    let rows: Vec<SequenceRow<'_>> = batch.iter().map(|w| series[w.specimen].row(w.t)).collect();
    let targets: Vec<f64> = batch.iter().map(|w| series[w.specimen].target(w.t)).collect();
    Ok((BatchInput::from_rows(&rows, None)?, Tensor::from_vec(targets)))
}

/// One optimizer step on `batch`; returns the batch loss.
fn train_step(
    model: &mut TataModel,
    opt: &mut AdamW,
    series: &[NormalizedSeries],
    batch: &[Window],
    clip_norm: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let (input, target) = batch_input(series, batch)?;
    let mut g = Graph::training(dropout_seed);
    let p = model.bind(&mut g, true);
    let pred = model.forward(&mut g, &p, &input, BatchScope::Joint)?;
    let loss = mse_loss(&mut g, pred, &target)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    g.backward(loss)?;
    let mut grads: Vec<Vec<f64>> = p
        .vars()
        .iter()
        .zip(model.params())
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    clip_gradients(&mut grads, clip_norm);
    opt.step(model.params_mut(), &grads)?;
    Ok(value)
}

/// Validation loss (model units) and MAPE (microstrain) over `windows`.
pub fn validate(model: &TataModel, data: &PreparedData, windows: &[Window]) -> Result<(f64, f64)> {
    let preds = predict_windows(model, &data.series, windows, 64)?;
    let targets: Vec<f64> = windows.iter().map(|w| data.series[w.specimen].target(w.t)).collect();
    let loss = preds.iter().zip(&targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / preds.len().max(1) as f64;
    let scale = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| data.stats.denormalize_creep(x)).collect() };
    Ok((loss, mape(&scale(&preds), &scale(&targets))?))
}

/// Trains `model` in place on the training windows of `data`, validating on
/// the validation windows after each epoch. On return the model holds the
/// weights of the epoch with the lowest validation loss. If the loss stops
/// being finite, those weights are restored and `Error::Diverged` returned.
pub fn train(
    model: &mut TataModel,
    data: &PreparedData,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.splits.train.is_empty() || data.splits.val.is_empty() {
        return Err(Error::Input("training and validation splits must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.params(), cfg.lr, cfg.weight_decay);
    let mut scheduler = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut metrics = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let batches = length_bucketed_batches(&data.splits.train, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for (i, batch) in batches.iter().enumerate() {
            let seed = cfg.seed ^ ((epoch as u64) << 32) ^ i as u64;
            match train_step(model, &mut opt, &data.series, batch, cfg.clip_norm, seed) {
                Ok(loss) => total += loss * batch.len() as f64,
                Err(Error::NonFinite(msg)) => {
                    if let Some((_, _, weights)) = best {
                        model.params_mut().clone_from_slice(&weights);
                    }
                    return Err(Error::Diverged { epoch, msg });
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = total / data.splits.train.len() as f64;
        let (val_loss, val_mape) = validate(model, data, &data.splits.val)?;
        if !val_loss.is_finite() {
            if let Some((_, _, weights)) = best {
                model.params_mut().clone_from_slice(&weights);
            }
            return Err(Error::Diverged {
                epoch,
                msg: "validation loss is not finite".into(),
            });
        }
        let m = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            val_mape,
            lr: opt.lr,
        };
        tracing::info!(epoch, train_loss, val_loss, val_mape, lr = opt.lr, "epoch done");
        on_epoch(&m);
        metrics.push(m);

        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, model.params().to_vec()));
        }
        opt.lr = scheduler.step(val_loss, opt.lr);
        if stopper.step(val_mape) {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_loss, weights) = best.expect("at least one epoch");
    model.params_mut().clone_from_slice(&weights);
    Ok(TrainReport {
        metrics,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}

pub fn write_metrics_csv<W: Write>(w: W, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(["epoch", "train_loss", "val_loss", "val_mape", "lr"])?;
    for m in metrics {
        out.serialize(m)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: &'static str,
    pub params: usize,
    pub val_mape: f64,
    pub best_epoch: usize,
}

/// Trains every ablation variant from the same seed and budget.
pub fn run_ablation_suite(
    data: &PreparedData,
    model_cfg: &TataConfig,
    train_cfg: &TrainConfig,
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    AblationVariant::ALL
        .iter()
        .map(|&variant| {
            let spec = variant.spec();
            let mut model = TataModel::new(model_cfg.clone(), spec, train_cfg.seed)?;
            let report = train(&mut model, data, train_cfg, |_| {})?;
            let (_, val_mape) = validate(&model, data, &data.splits.val)?;
            let row = AblationRow {
                variant: variant.label(),
                params: count_params(model_cfg, &spec),
                val_mape,
                best_epoch: report.best_epoch,
            };
            on_row(&row);
            Ok(row)
        })
        .collect()
}

pub fn write_ablation_csv<W: Write>(w: W, rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(["variant", "params", "val_mape", "best_epoch"])?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
