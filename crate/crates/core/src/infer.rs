//! Metrics, teacher-forced evaluation and autoregressive rollout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, NormalizedSeries, Window, DAILY_POINTS};
use crate::error::{Error, Result};
use crate::model::{BatchInput, SequenceRow, TataModel};

/// Smallest denominator used by [`mape`], microstrain.
pub const MAPE_FLOOR: f64 = 1.0;
/// Longest trajectory a rollout can produce, days.
pub const MAX_HORIZON: usize = DAILY_POINTS + 1;

/// Mean absolute percentage error, with `|actual|` floored at 1.
pub fn mape(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::Input(format!("{} predictions for {} targets", pred.len(), actual.len())));
    }
    if pred.is_empty() {
        return Err(Error::Input("MAPE of an empty set".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a).abs() / a.abs().max(MAPE_FLOOR))
        .sum();
    Ok(100.0 * sum / pred.len() as f64)
}

pub fn r_squared(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() || pred.is_empty() {
        return Err(Error::Input("R² needs equal-length, non-empty inputs".into()));
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Input("R² is undefined for constant targets".into()));
    }
    let ss_res: f64 = pred.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Evaluation-mode next-step predictions (model units) for `windows`, in
/// input order. Rows are grouped by length into chunks of `chunk`; each row
/// is computed as if alone in its batch.
pub fn predict_windows(model: &TataModel, series: &[NormalizedSeries], windows: &[Window], chunk: usize) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by_key(|&i| (windows[i].t, i));
    let mut out = vec![0.0; windows.len()];
    for group in order.chunks(chunk.max(1)) {
        let rows: Vec<SequenceRow<'_>> = group.iter().map(|&i| series[windows[i].specimen].row(windows[i].t)).collect();
        let preds = model.predict(&BatchInput::from_rows(&rows, None)?)?;
        for (&i, p) in group.iter().zip(preds) {
            out[i] = p;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Residual {
    pub specimen_id: String,
    pub t: usize,
    pub actual: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    pub mape: f64,
    pub r2: f64,
    /// Microstrain, one row per window.
    pub residuals: Vec<Residual>,
}

/// Single-step predictions from ground-truth prefixes, scored in microstrain.
pub fn evaluate_teacher_forced(
    model: &TataModel,
    stats: &NormStats,
    series: &[NormalizedSeries],
    windows: &[Window],
) -> Result<TeacherForced> {
    if windows.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let preds = predict_windows(model, series, windows, 64)?;
    let residuals: Vec<Residual> = windows
        .iter()
        .zip(&preds)
        .map(|(w, &p)| {
            let s = &series[w.specimen];
            Residual {
                specimen_id: s.id.clone(),
                t: w.t,
                actual: stats.denormalize_creep(s.target(w.t)),
                predicted: stats.denormalize_creep(p),
            }
        })
        .collect();
    let p: Vec<f64> = residuals.iter().map(|r| r.predicted).collect();
    let a: Vec<f64> = residuals.iter().map(|r| r.actual).collect();
    Ok(TeacherForced {
        mape: mape(&p, &a)?,
        r2: r_squared(&p, &a)?,
        residuals,
    })
}

pub fn write_residuals_csv<W: Write>(w: W, residuals: &[Residual]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in residuals {
        out.serialize(r)?;
    }
    if residuals.is_empty() {
        out.write_record(["specimen_id", "t", "actual", "predicted"])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutRequest {
    /// kg/m³
    pub density: f64,
    /// ksc
    pub fc: f64,
    /// ksc
    pub e: f64,
    /// Creep on day 1, microstrain.
    pub initial_creep: f64,
    /// Trajectory length in days, 1..=161.
    pub horizon: usize,
}

impl RolloutRequest {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("density", self.density), ("fc", self.fc), ("E", self.e)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Input(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.initial_creep.is_finite() && self.initial_creep >= 0.0) {
            return Err(Error::Input(format!("initial creep must be non-negative, got {}", self.initial_creep)));
        }
        if !(1..=MAX_HORIZON).contains(&self.horizon) {
            return Err(Error::Input(format!("horizon must lie in 1..={MAX_HORIZON}, got {}", self.horizon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub days: Vec<usize>,
    /// Microstrain.
    pub creep: Vec<f64>,
}

/// Autoregressive forecast: day 1 is the given initial creep, and each
/// following day is predicted from every earlier day, one sample at a time.
pub fn rollout(model: &TataModel, stats: &NormStats, req: &RolloutRequest) -> Result<Trajectory> {
    req.validate()?;
    let features = stats.normalize_features(&[req.density, req.fc, req.e]);
    let mut creep = vec![stats.normalize_creep(req.initial_creep)];
    let mut time = vec![NormStats::normalize_time(1.0)];
    for day in 2..=req.horizon {
        let row = SequenceRow {
            creep: &creep,
            time: &time,
            features: &features,
        };
        let next = model.predict(&BatchInput::from_rows(&[row], None)?)?[0];
        if !next.is_finite() {
            return Err(Error::NonFinite(format!("rollout prediction for day {day}")));
        }
        creep.push(next);
        time.push(NormStats::normalize_time(day as f64));
    }
    Ok(Trajectory {
        days: (1..=req.horizon).collect(),
        creep: creep.iter().map(|&v| stats.denormalize_creep(v)).collect(),
    })
}

pub fn write_trajectory_csv<W: Write>(w: W, traj: &Trajectory) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["day", "creep_microstrain"])?;
    for (d, c) in traj.days.iter().zip(&traj.creep) {
        out.write_record([d.to_string(), c.to_string()])?;
    }
    out.flush()?;
    Ok(())
}
