use serde::{Deserialize, Serialize};

use crate::stats::mean_std;

use super::{DetectorId, DetectorVote};

const SIGMA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CusumParams {
    /// Reference value κ, in standard deviations.
    pub kappa: f64,
    /// Decision threshold h.
    pub h: f64,
    /// Samples used to estimate μ and σ before voting starts.
    pub calibration: usize,
}

impl Default for CusumParams {
    fn default() -> Self {
        CusumParams { kappa: 0.5, h: 5.0, calibration: 30 }
    }
}

/// Two-sided tabular CUSUM over standardized residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct CusumState {
    calibration: Vec<f64>,
    baseline: Option<(f64, f64)>,
    pub upper: f64,
    pub lower: f64,
}

impl CusumState {
    pub fn new() -> Self {
        CusumState { calibration: Vec::new(), baseline: None, upper: 0.0, lower: 0.0 }
    }

    /// A detector whose calibration is already known.
    pub fn with_baseline(mu: f64, sigma: f64) -> Self {
        CusumState { calibration: Vec::new(), baseline: Some((mu, sigma.max(SIGMA_FLOOR))), upper: 0.0, lower: 0.0 }
    }

    pub fn baseline(&self) -> Option<(f64, f64)> {
        self.baseline
    }

    pub fn is_calibrated(&self) -> bool {
        self.baseline.is_some()
    }
}

impl Default for CusumState {
    fn default() -> Self {
        Self::new()
    }
}

/// Feeds one value. Returns `None` while the calibration sample is still
/// being collected.
pub fn detect_cusum(state: &mut CusumState, params: &CusumParams, value: f64) -> Option<DetectorVote> {
    let Some((mu, sigma)) = state.baseline else {
        state.calibration.push(value);
        if state.calibration.len() >= params.calibration {
            let (mu, sigma) = mean_std(&state.calibration).expect("non-empty calibration");
            state.baseline = Some((mu, sigma.max(SIGMA_FLOOR)));
            state.calibration.clear();
        }
        return None;
    };
    let x = (value - mu) / sigma;
    state.upper = (state.upper + x - params.kappa).max(0.0);
    state.lower = (state.lower - x - params.kappa).max(0.0);
    let score = state.upper.max(state.lower);
    let anomalous = score > params.h;
    if anomalous {
        state.upper = 0.0;
        state.lower = 0.0;
    }
    Some(DetectorVote { detector_id: DetectorId::Cusum, anomalous, score })
}
