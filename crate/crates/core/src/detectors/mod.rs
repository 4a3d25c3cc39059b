//! Analyze stage: streaming detectors combined by majority vote.
//!
//! Every enabled detector casts at most one vote per stream per window.
//! Streaming detectors (z-score, CUSUM) see each filtered sample in tick
//! order; their window vote is anomalous if any sample alarmed, scored by the
//! largest sample score. Detectors still warming up withhold their vote.

mod coupling;
mod cusum;
mod ensemble;
mod pca;
mod threshold;
mod zscore;

pub use coupling::{jaccard, org_coupling, CouplingParams, CouplingVote};
pub use cusum::{detect_cusum, CusumParams, CusumState};
pub use ensemble::{ensemble, is_majority, kind_for, AnomalyReport, EnsembleContext, Severity, SeverityScale};
pub use pca::{covariance, detect_pca, Pca, PcaError, PcaParams};
pub use threshold::{detect_threshold, detect_threshold_value};
pub use zscore::{detect_zscore, ZScoreDetector, ZScoreParams};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::planner::GoalSpec;
use crate::telemetry::ClosedWindow;
use crate::types::{Layer, MetricKind, ServiceId, Target};

/// Detectors, in tie-break priority order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorId {
    Threshold,
    Cusum,
    Zscore,
    Pca,
    Coupling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorVote {
    pub detector_id: DetectorId,
    pub anomalous: bool,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub enabled: Vec<DetectorId>,
    pub zscore: ZScoreParams,
    pub cusum: CusumParams,
    pub pca: PcaParams,
    pub coupling: CouplingParams,
    /// Threshold-detector score treated as one severity unit.
    pub threshold_severity_unit: f64,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            enabled: vec![DetectorId::Threshold, DetectorId::Cusum, DetectorId::Zscore, DetectorId::Coupling],
            zscore: ZScoreParams::default(),
            cusum: CusumParams::default(),
            pca: PcaParams::default(),
            coupling: CouplingParams::default(),
            threshold_severity_unit: 0.5,
        }
    }
}

impl AnalyzeConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unique: BTreeSet<_> = self.enabled.iter().collect();
        if unique.len() != self.enabled.len() {
            return Err("analyze.enabled lists a detector twice".into());
        }
        if self.zscore.window < 2 {
            return Err("analyze.zscore.window must be >= 2".into());
        }
        if !(self.zscore.k > 0.0) {
            return Err("analyze.zscore.k must be > 0".into());
        }
        if !(self.cusum.kappa >= 0.0) {
            return Err("analyze.cusum.kappa must be >= 0".into());
        }
        if !(self.cusum.h > 0.0) {
            return Err("analyze.cusum.h must be > 0".into());
        }
        if self.cusum.calibration < 2 {
            return Err("analyze.cusum.calibration must be >= 2".into());
        }
        if self.pca.components < 1 || self.pca.components > MetricKind::ALL.len() {
            return Err(format!("analyze.pca.components must be in 1..={}", MetricKind::ALL.len()));
        }
        if !(self.pca.spe_threshold > 0.0) || self.pca.spe_thresholds.values().any(|t| !(*t > 0.0)) {
            return Err("analyze.pca spe thresholds must be > 0".into());
        }
        if !(self.coupling.tau > 0.0 && self.coupling.tau <= 1.0) {
            return Err("analyze.coupling.tau must be in (0, 1]".into());
        }
        if !(self.threshold_severity_unit > 0.0) {
            return Err("analyze.threshold_severity_unit must be > 0".into());
        }
        Ok(())
    }

    pub fn is_enabled(&self, d: DetectorId) -> bool {
        self.enabled.contains(&d)
    }

    pub fn severity_scale(&self) -> SeverityScale {
        SeverityScale {
            threshold: self.threshold_severity_unit,
            zscore: self.zscore.k,
            cusum: self.cusum.h,
            pca: self.pca.spe_threshold,
            coupling: self.coupling.tau,
        }
    }
}

/// Collapses per-sample votes into one window vote.
fn window_vote(votes: impl IntoIterator<Item = DetectorVote>) -> Option<DetectorVote> {
    votes.into_iter().reduce(|acc, v| DetectorVote {
        detector_id: acc.detector_id,
        anomalous: acc.anomalous || v.anomalous,
        score: acc.score.max(v.score),
    })
}

type StreamKey = (ServiceId, MetricKind);

/// Owns per-stream detector state across windows.
#[derive(Debug, Clone)]
pub struct Analyzer {
    config: AnalyzeConfig,
    zscore: BTreeMap<StreamKey, ZScoreDetector>,
    cusum: BTreeMap<StreamKey, CusumState>,
    next_id: u64,
}

impl Analyzer {
    pub fn new(config: AnalyzeConfig) -> Self {
        Analyzer { config, zscore: BTreeMap::new(), cusum: BTreeMap::new(), next_id: 0 }
    }

    pub fn config(&self) -> &AnalyzeConfig {
        &self.config
    }

    /// Forgets learned baselines for a service, e.g. after it was remediated.
    pub fn reset_service(&mut self, service: &ServiceId) {
        self.zscore.retain(|(s, _), _| s != service);
        self.cusum.retain(|(s, _), _| s != service);
    }

    fn emit(
        &mut self,
        votes: &[DetectorVote],
        target: Target,
        metric: Option<MetricKind>,
        layer: Layer,
        tick: u64,
    ) -> Option<AnomalyReport> {
        let ctx =
            EnsembleContext { id: format!("anomaly-{}", self.next_id), target, metric, layer, tick, scale: self.config.severity_scale() };
        let report = ensemble(votes, &ctx)?;
        self.next_id += 1;
        Some(report)
    }

    pub fn analyze(&mut self, window: &ClosedWindow, goals: &GoalSpec) -> Vec<AnomalyReport> {
        let tick = window.window.end.saturating_sub(1);
        let mut reports = Vec::new();

        for stream in &window.streams {
            let agg = &stream.aggregate;
            let key = (agg.service_id.clone(), agg.metric);
            let mut votes = Vec::new();
            if self.config.is_enabled(DetectorId::Threshold) {
                if let Some(bounds) = goals.bounds(&agg.service_id, agg.metric) {
                    votes.extend(detect_threshold(agg, &bounds));
                }
            }
            if self.config.is_enabled(DetectorId::Cusum) {
                let params = self.config.cusum;
                let state = self.cusum.entry(key.clone()).or_default();
                votes.extend(window_vote(stream.samples.iter().filter_map(|s| detect_cusum(state, &params, s.value))));
            }
            if self.config.is_enabled(DetectorId::Zscore) {
                let params = self.config.zscore;
                let det = self.zscore.entry(key.clone()).or_insert_with(|| ZScoreDetector::new(params));
                votes.extend(window_vote(stream.samples.iter().filter_map(|s| det.observe(s.value))));
            }
            let target = Target::Service(agg.service_id.clone());
            reports.extend(self.emit(&votes, target, Some(agg.metric), agg.layer, tick));
        }

        if self.config.is_enabled(DetectorId::Pca) {
            for (service, rows) in pca_rows(window) {
                let threshold = self.config.pca.threshold_for(service.as_str());
                if let Ok(vote) = detect_pca(&rows, self.config.pca.components, threshold) {
                    reports.extend(self.emit(&[vote], Target::Service(service), None, Layer::Dynamic, tick));
                }
            }
        }

        if self.config.is_enabled(DetectorId::Coupling) {
            for cv in org_coupling(&window.collaboration, self.config.coupling.tau) {
                let target = Target::pair(cv.pair.0, cv.pair.1);
                reports.extend(self.emit(&[cv.vote], target, None, Layer::Organizational, tick));
            }
        }

        reports
    }
}

/// Per-service matrix: one row per tick where every metric was observed.
fn pca_rows(window: &ClosedWindow) -> BTreeMap<ServiceId, Vec<Vec<f64>>> {
    let mut by_tick: BTreeMap<ServiceId, BTreeMap<u64, BTreeMap<MetricKind, f64>>> = BTreeMap::new();
    for stream in &window.streams {
        for s in &stream.samples {
            by_tick.entry(s.service_id.clone()).or_default().entry(s.tick).or_default().insert(s.metric, s.value);
        }
    }
    by_tick
        .into_iter()
        .map(|(svc, ticks)| {
            let rows = ticks
                .into_values()
                .filter(|m| m.len() == MetricKind::ALL.len())
                .map(|m| MetricKind::ALL.iter().map(|k| m[k]).collect())
                .collect();
            (svc, rows)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{aggregate, MetricSample, StreamWindow, Window};
    use crate::types::{AnomalyKind, Bounds};

    fn stream(service: &str, metric: MetricKind, values: &[f64], start: u64) -> StreamWindow {
        let samples: Vec<MetricSample> =
            values.iter().enumerate().map(|(i, v)| MetricSample::new(service, metric, *v, start + i as u64)).collect();
        let window = Window { start, end: start + values.len() as u64 };
        StreamWindow { aggregate: aggregate(&samples, window).unwrap(), samples }
    }

    fn closed(streams: Vec<StreamWindow>) -> ClosedWindow {
        let window = streams[0].aggregate.window;
        ClosedWindow { window, streams, gaps: vec![], collaboration: vec![] }
    }

    #[test]
    fn healthy_constant_stream_is_quiet() {
        let mut a = Analyzer::new(AnalyzeConfig::default());
        let mut goals = GoalSpec::default();
        goals.set("svc-a", MetricKind::MemMb, Bounds::max(120.0));
        for w in 0..10u64 {
            let win = closed(vec![stream("svc-a", MetricKind::MemMb, &[100.0; 20], w * 20)]);
            assert!(a.analyze(&win, &goals).is_empty());
        }
    }

    #[test]
    fn threshold_alone_decides_during_warm_up() {
        let mut a = Analyzer::new(AnalyzeConfig::default());
        let mut goals = GoalSpec::default();
        goals.set("svc-a", MetricKind::LatencyMs, Bounds::max(30.0));
        let win = closed(vec![stream("svc-a", MetricKind::LatencyMs, &[20.0, 80.0], 0)]);
        let reports = a.analyze(&win, &goals);
        assert_eq!(reports.len(), 1);
        assert_eq!(reports[0].signature.kind, AnomalyKind::RangeViolation);
        assert_eq!(reports[0].tick, 1);
    }

    #[test]
    fn reset_service_forgets_baselines() {
        let mut a = Analyzer::new(AnalyzeConfig::default());
        let goals = GoalSpec::default();
        a.analyze(&closed(vec![stream("svc-a", MetricKind::CpuPct, &[1.0; 40], 0)]), &goals);
        assert!(!a.cusum.is_empty());
        a.reset_service(&"svc-a".into());
        assert!(a.cusum.is_empty() && a.zscore.is_empty());
    }

    #[test]
    fn default_config_is_valid_and_bad_values_rejected() {
        assert!(AnalyzeConfig::default().validate().is_ok());
        let mut c = AnalyzeConfig::default();
        c.coupling.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = AnalyzeConfig::default();
        c.zscore.window = 1;
        assert!(c.validate().is_err());
        let mut c = AnalyzeConfig::default();
        c.pca.components = 6;
        assert!(c.validate().is_err());
    }
}
