use serde::{Deserialize, Serialize};

use crate::types::{AnomalyKind, Layer, MetricKind, Signature, Target, Tick};

use super::{DetectorId, DetectorVote};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub id: String,
    pub signature: Signature,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
    pub layer: Layer,
    pub severity: Severity,
    pub votes: Vec<DetectorVote>,
    pub tick: Tick,
}

/// Per-detector score that counts as "one threshold" for severity bands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeverityScale {
    pub threshold: f64,
    pub zscore: f64,
    pub cusum: f64,
    pub pca: f64,
    pub coupling: f64,
}

impl SeverityScale {
    pub fn reference(&self, detector: DetectorId) -> f64 {
        match detector {
            DetectorId::Threshold => self.threshold,
            DetectorId::Zscore => self.zscore,
            DetectorId::Cusum => self.cusum,
            DetectorId::Pca => self.pca,
            DetectorId::Coupling => self.coupling,
        }
    }

    /// Below 2x the reference is low, below 5x medium, else high.
    pub fn classify(&self, detector: DetectorId, score: f64) -> Severity {
        let unit = self.reference(detector);
        if score < 2.0 * unit {
            Severity::Low
        } else if score < 5.0 * unit {
            Severity::Medium
        } else {
            Severity::High
        }
    }
}

/// Maps the winning detector (and the metric it watched) to an anomaly kind.
///
/// Certificate streams have a single failure mode, so every detector on them
/// reports `cert_expiring`.
pub fn kind_for(detector: DetectorId, metric: Option<MetricKind>) -> AnomalyKind {
    match (detector, metric) {
        (_, Some(MetricKind::CertDaysRemaining)) => AnomalyKind::CertExpiring,
        (DetectorId::Threshold, Some(MetricKind::ErrorRate)) => AnomalyKind::ServiceDown,
        (DetectorId::Threshold, _) => AnomalyKind::RangeViolation,
        (DetectorId::Cusum, _) => AnomalyKind::LevelShift,
        (DetectorId::Zscore, _) => AnomalyKind::PointOutlier,
        (DetectorId::Pca, _) => AnomalyKind::MultivariateDrift,
        (DetectorId::Coupling, _) => AnomalyKind::OrgCoupling,
    }
}

/// Everything the ensemble needs besides the votes.
#[derive(Debug, Clone)]
pub struct EnsembleContext {
    pub id: String,
    pub target: Target,
    pub metric: Option<MetricKind>,
    pub layer: Layer,
    pub tick: Tick,
    pub scale: SeverityScale,
}

/// True iff strictly more than half of the present votes are anomalous.
pub fn is_majority(votes: &[DetectorVote]) -> bool {
    let hits = votes.iter().filter(|v| v.anomalous).count();
    !votes.is_empty() && 2 * hits > votes.len()
}

/// Majority vote over the present (non-withheld) detector votes.
pub fn ensemble(votes: &[DetectorVote], ctx: &EnsembleContext) -> Option<AnomalyReport> {
    if !is_majority(votes) {
        return None;
    }
    let winner = votes.iter().filter(|v| v.anomalous).min_by(|a, b| b.score.total_cmp(&a.score).then(a.detector_id.cmp(&b.detector_id)))?;
    Some(AnomalyReport {
        id: ctx.id.clone(),
        signature: Signature::new(kind_for(winner.detector_id, ctx.metric), ctx.target.clone()),
        metric: ctx.metric,
        layer: ctx.layer,
        severity: ctx.scale.classify(winner.detector_id, winner.score),
        votes: votes.to_vec(),
        tick: ctx.tick,
    })
}
