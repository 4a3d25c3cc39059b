use crate::telemetry::WindowAggregate;
use crate::types::Bounds;

use super::{DetectorId, DetectorVote};

/// Relative exceedance of `value` past `bound`. A zero bound falls back to
/// absolute exceedance.
fn exceedance(value: f64, bound: f64) -> f64 {
    let scale = if bound.abs() < 1e-9 { 1.0 } else { bound.abs() };
    (value - bound).abs() / scale
}

/// Compares a window mean against goal bounds. `None` when no bound is set.
pub fn detect_threshold(aggregate: &WindowAggregate, bounds: &Bounds) -> Option<DetectorVote> {
    detect_threshold_value(aggregate.mean, bounds)
}

pub fn detect_threshold_value(mean: f64, bounds: &Bounds) -> Option<DetectorVote> {
    if !bounds.is_configured() {
        return None;
    }
    let score = match (bounds.min, bounds.max) {
        (Some(lo), _) if mean < lo => exceedance(mean, lo),
        (_, Some(hi)) if mean > hi => exceedance(mean, hi),
        _ => 0.0,
    };
    Some(DetectorVote { detector_id: DetectorId::Threshold, anomalous: score > 0.0, score })
}
