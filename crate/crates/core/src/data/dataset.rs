//! Standardized specimens, normalization, prefix windows and splits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::curve::{fit_creep_curve, CreepCurveParams, DAILY_POINTS};
use super::SpecimenRecord;
use crate::error::{Error, Result};
use crate::model::SequenceRow;

pub const FEATURE_NAMES: [&str; 3] = ["density", "fc", "E"];
pub const CREEP_SCALE: f64 = 1000.0;
pub const STD_FLOOR: f64 = 1e-8;

/// A specimen on the daily grid, days 1..=160, plus the fitted curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Specimen {
    pub id: String,
    /// `(density, fc, E)`
    pub features: [f64; 3],
    pub params: CreepCurveParams,
    pub daily: Vec<f64>,
}

impl Specimen {
    pub fn from_params(id: impl Into<String>, features: [f64; 3], params: CreepCurveParams) -> Self {
        Self {
            id: id.into(),
            features,
            params,
            daily: params.resample_daily(),
        }
    }

    /// Creep at day 161, extrapolated from the fitted curve.
    pub fn next_after_last(&self) -> f64 {
        self.params.eval((DAILY_POINTS + 1) as f64).expect("positive day")
    }

    pub fn to_record(&self) -> SpecimenRecord {
        SpecimenRecord {
            id: self.id.clone(),
            density: self.features[0],
            fc: self.features[1],
            e: self.features[2],
            times: (1..=DAILY_POINTS).map(|d| d as f64).collect(),
            creeps: self.daily.clone(),
        }
    }
}

/// Fits every record and resamples it to the daily grid.
pub fn standardize(records: &[SpecimenRecord]) -> Result<Vec<Specimen>> {
    records
        .iter()
        .map(|r| {
            let params = fit_creep_curve(&r.times, &r.creeps).map_err(|e| Error::Fit(format!("specimen {}: {e}", r.id)))?;
            if !params.converged {
                tracing::warn!(specimen = %r.id, n_evals = params.n_evals, "curve fit did not converge; keeping best point");
            }
            Ok(Specimen::from_params(r.id.clone(), r.features(), params))
        })
        .collect()
}

/// Scales shared by training and inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub alpha: f64,
    pub feat_mean: [f64; 3],
    pub feat_std: [f64; 3],
}

impl NormStats {
    /// Population mean and standard deviation of `rows`, std floored at 1e-8.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64; 3]>) -> Result<Self> {
        let rows: Vec<&[f64; 3]> = rows.into_iter().collect();
        if rows.is_empty() {
            return Err(Error::Input("cannot fit normalization on an empty split".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for j in 0..3 {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = var.sqrt().max(STD_FLOOR);
        }
        Ok(Self {
            alpha: CREEP_SCALE,
            feat_mean: mean,
            feat_std: std,
        })
    }

    pub fn normalize_creep(&self, microstrain: f64) -> f64 {
        microstrain / self.alpha
    }

    pub fn denormalize_creep(&self, value: f64) -> f64 {
        value * self.alpha
    }

    pub fn normalize_time(day: f64) -> f64 {
        day.ln_1p()
    }

    pub fn denormalize_time(value: f64) -> f64 {
        value.exp_m1()
    }

    pub fn normalize_features(&self, raw: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|j| (raw[j] - self.feat_mean[j]) / self.feat_std[j])
    }

    pub fn denormalize_features(&self, z: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|j| z[j] * self.feat_std[j] + self.feat_mean[j])
    }
}

/// A specimen in model units: 161 creep values (days 1..=161, the last from
/// the fitted curve) and matching log-times.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSeries {
    pub id: String,
    pub features: [f64; 3],
    pub creep: Vec<f64>,
    pub time: Vec<f64>,
}

impl NormalizedSeries {
    pub fn new(specimen: &Specimen, stats: &NormStats) -> Self {
        let mut creep: Vec<f64> = specimen.daily.iter().map(|&v| stats.normalize_creep(v)).collect();
        creep.push(stats.normalize_creep(specimen.next_after_last()));
        let time = (1..=DAILY_POINTS + 1).map(|d| NormStats::normalize_time(d as f64)).collect();
        Self {
            id: specimen.id.clone(),
            features: stats.normalize_features(&specimen.features),
            creep,
            time,
        }
    }

    /// Prefix of length `t` (days 1..=t) as model input.
    pub fn row(&self, t: usize) -> SequenceRow<'_> {
        SequenceRow {
            creep: &self.creep[..t],
            time: &self.time[..t],
            features: &self.features,
        }
    }

    /// Creep at day `t + 1`.
    pub fn target(&self, t: usize) -> f64 {
        self.creep[t]
    }

    pub fn sample(&self, t: usize) -> TrainingSample {
        TrainingSample {
            specimen_id: self.id.clone(),
            creep_prefix: self.creep[..t].to_vec(),
            time_prefix: self.time[..t].to_vec(),
            features: self.features,
            target: self.target(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub specimen_id: String,
    pub creep_prefix: Vec<f64>,
    pub time_prefix: Vec<f64>,
    pub features: [f64; 3],
    pub target: f64,
}

/// One prefix window: specimen index and prefix length `t` in 1..=160.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Window {
    pub specimen: usize,
    pub t: usize,
}

pub fn build_windows(n_specimens: usize) -> Vec<Window> {
    (0..n_specimens)
        .flat_map(|specimen| (1..=DAILY_POINTS).map(move |t| Window { specimen, t }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Windows are shuffled individually; prefixes of one specimen can
    /// appear in several splits.
    PerWindow,
    /// Whole specimens are assigned to one split.
    PerSpecimen,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-window" => Ok(Self::PerWindow),
            "per-specimen" => Ok(Self::PerSpecimen),
            _ => Err(Error::Config(format!("unknown split mode `{s}` (per-window | per-specimen)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { val: 0.05, test: 0.05 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

/// Seeded split. Validation and test sizes are `round(n · fraction)` of the
/// shuffled units (windows or specimens); training keeps the rest.
pub fn split(windows: &[Window], mode: SplitMode, fractions: SplitFractions, seed: u64) -> Result<Splits> {
    let SplitFractions { val, test } = fractions;
    if !(val > 0.0 && test > 0.0 && val + test < 1.0) {
        return Err(Error::Config(format!("invalid split fractions val={val}, test={test}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = |n: usize| -> Result<(usize, usize)> {
        let nv = (n as f64 * val).round() as usize;
        let nt = (n as f64 * test).round() as usize;
        if nv == 0 || nt == 0 || nv + nt >= n {
            return Err(Error::Input(format!("{n} units are too few for three non-empty splits")));
        }
        Ok((nv, nt))
    };
    let mut out = Splits::default();
    match mode {
        SplitMode::PerWindow => {
            let mut all = windows.to_vec();
            all.shuffle(&mut rng);
            let (nv, nt) = counts(all.len())?;
            out.val = all[..nv].to_vec();
            out.test = all[nv..nv + nt].to_vec();
            out.train = all[nv + nt..].to_vec();
        }
        SplitMode::PerSpecimen => {
            let mut ids: Vec<usize> = windows.iter().map(|w| w.specimen).collect();
            ids.sort_unstable();
            ids.dedup();
            ids.shuffle(&mut rng);
            let (nv, nt) = counts(ids.len())?;
            let role = |s: usize| ids.iter().position(|&x| x == s).map(|p| if p < nv { 1 } else if p < nv + nt { 2 } else { 0 });
            for &w in windows {
                match role(w.specimen) {
                    Some(1) => out.val.push(w),
                    Some(2) => out.test.push(w),
                    _ => out.train.push(w),
                }
            }
        }
    }
    Ok(out)
}

/// Everything the trainer and evaluators need from one dataset.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub specimens: Vec<Specimen>,
    pub stats: NormStats,
    pub series: Vec<NormalizedSeries>,
    pub splits: Splits,
}

impl PreparedData {
    /// Splits windows, fits normalization on the training windows and
    /// normalizes every specimen.
    pub fn new(specimens: Vec<Specimen>, mode: SplitMode, seed: u64) -> Result<Self> {
        let windows = build_windows(specimens.len());
        let splits = split(&windows, mode, SplitFractions::default(), seed)?;
        let stats = NormStats::fit(splits.train.iter().map(|w| &specimens[w.specimen].features))?;
        let series = specimens.iter().map(|s| NormalizedSeries::new(s, &stats)).collect();
        Ok(Self {
            specimens,
            stats,
            series,
            splits,
        })
    }

    /// Raw feature rows of specimens with at least one training window,
    /// in specimen order.
    pub fn training_features(&self) -> Vec<[f64; 3]> {
        let mut idx: Vec<usize> = self.splits.train.iter().map(|w| w.specimen).collect();
        idx.sort_unstable();
        idx.dedup();
        idx.into_iter().map(|i| self.specimens[i].features).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        let stats = NormStats::fit([&[2300.0, 400.0, 3.0e5], &[2400.0, 500.0, 3.2e5]]).unwrap();
        assert_eq!(NormStats::normalize_time(0.0), 0.0);
        assert_eq!(stats.normalize_creep(1000.0), 1.0);
        assert_eq!(stats.normalize_features(&[2350.0, 450.0, 3.1e5]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn constant_feature_uses_floor() {
        let stats = NormStats::fit([&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]]).unwrap();
        assert_eq!(stats.feat_std, [STD_FLOOR; 3]);
    }

    #[test]
    fn per_specimen_rounding() {
        let windows = build_windows(20);
        let s = split(&windows, SplitMode::PerSpecimen, SplitFractions::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (18 * 160, 160, 160));
    }

    #[test]
    fn too_few_units_is_an_error() {
        let windows = build_windows(3);
        assert!(split(&windows, SplitMode::PerSpecimen, SplitFractions::default(), 1).is_err());
    }
}
