//! Raw creep records, curve standardization and training windows.

pub mod csvio;
pub mod curve;
mod dataset;
pub mod synth;

use serde::{Deserialize, Serialize};

pub use curve::{creep_at, fit_creep_curve, CreepCurveParams, DAILY_POINTS};
pub use dataset::{
    build_windows, split, standardize, NormStats, NormalizedSeries, PreparedData, Specimen, SplitFractions, SplitMode,
    Splits, TrainingSample, Window, CREEP_SCALE, FEATURE_NAMES, STD_FLOOR,
};
pub use synth::synth_generate;

/// One specimen's measurements as recorded: irregular days and microstrain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecimenRecord {
    pub id: String,
    /// kg/m³
    pub density: f64,
    /// ksc
    pub fc: f64,
    /// ksc
    pub e: f64,
    pub times: Vec<f64>,
    pub creeps: Vec<f64>,
}

impl SpecimenRecord {
    pub fn features(&self) -> [f64; 3] {
        [self.density, self.fc, self.e]
    }
}
