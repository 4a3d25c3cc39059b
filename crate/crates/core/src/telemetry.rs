//! Monitor stage: sample ingestion, filtering and tumbling-window aggregation.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::mean_std;
use crate::types::{Layer, MetricKind, ServiceId, Tick};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub service_id: ServiceId,
    pub metric: MetricKind,
    pub layer: Layer,
    pub value: f64,
    pub tick: Tick,
}

impl MetricSample {
    pub fn new(service: &str, metric: MetricKind, value: f64, tick: Tick) -> Self {
        MetricSample { service_id: service.into(), metric, layer: Layer::Dynamic, value, tick }
    }

    pub fn is_valid(&self) -> bool {
        self.metric.in_range(self.value)
    }
}

/// A contributor touching a service; the raw material for coupling analysis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollaborationEvent {
    pub contributor_id: String,
    pub service_id: ServiceId,
    pub tick: Tick,
}

/// Anything a sensor can hand to the monitor. Also the trace-file record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Observation {
    Metric(MetricSample),
    Collaboration(CollaborationEvent),
}

/// Half-open tick interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: Tick,
    pub end: Tick,
}

impl Window {
    pub fn contains(&self, tick: Tick) -> bool {
        self.start <= tick && tick < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowAggregate {
    pub service_id: ServiceId,
    pub metric: MetricKind,
    pub layer: Layer,
    pub window: Window,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub stddev: f64,
}

/// Aggregates the samples falling in `window`. `None` means a sensor gap.
///
/// Values are sorted before summation so the result does not depend on the
/// order samples arrived in.
pub fn aggregate(samples: &[MetricSample], window: Window) -> Option<WindowAggregate> {
    let inside: Vec<&MetricSample> = samples.iter().filter(|s| window.contains(s.tick)).collect();
    let first = inside.first()?;
    let mut values: Vec<f64> = inside.iter().map(|s| s.value).collect();
    values.sort_by(f64::total_cmp);
    let (mean, stddev) = mean_std(&values)?;
    let min = values[0];
    let max = values[values.len() - 1];
    Some(WindowAggregate {
        service_id: first.service_id.clone(),
        metric: first.metric,
        layer: first.layer,
        window,
        count: values.len(),
        mean: mean.clamp(min, max),
        min,
        max,
        stddev,
    })
}

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("clamp_outlier needs k > 0, got {0}")]
    NonPositiveK(f64),
    #[error("downsample needs n >= 1")]
    ZeroStride,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum FilterRule {
    Dedup,
    ClampOutlier { k: f64 },
    Downsample { n: usize },
}

impl FilterRule {
    pub fn validate(&self) -> Result<(), FilterError> {
        match *self {
            FilterRule::ClampOutlier { k } if !(k > 0.0) => Err(FilterError::NonPositiveK(k)),
            FilterRule::Downsample { n: 0 } => Err(FilterError::ZeroStride),
            _ => Ok(()),
        }
    }
}

/// Applies one filter rule to a tick-ordered stream.
pub fn apply_filter(stream: &[MetricSample], rule: FilterRule) -> Vec<MetricSample> {
    match rule {
        FilterRule::Dedup => {
            let mut out: Vec<MetricSample> = Vec::with_capacity(stream.len());
            for s in stream {
                let dup = out.last().is_some_and(|p| p.tick == s.tick && p.value == s.value);
                if !dup {
                    out.push(s.clone());
                }
            }
            out
        }
        FilterRule::ClampOutlier { k } => {
            let values: Vec<f64> = stream.iter().map(|s| s.value).collect();
            let Some((mean, std)) = mean_std(&values) else {
                return Vec::new();
            };
            let (lo, hi) = (mean - k * std, mean + k * std);
            stream.iter().map(|s| MetricSample { value: s.value.clamp(lo, hi), ..s.clone() }).collect()
        }
        FilterRule::Downsample { n } => stream.iter().step_by(n.max(1)).cloned().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub window_len: u64,
    pub filters: Vec<FilterRule>,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig { window_len: 20, filters: vec![FilterRule::Dedup] }
    }
}

/// Why samples were discarded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropTally {
    pub range: u64,
    pub unknown_service: u64,
    pub empty_identifier: u64,
    pub overflow: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorGap {
    pub service_id: ServiceId,
    pub metric: MetricKind,
}

/// The filtered samples and aggregate of one stream for one window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamWindow {
    pub samples: Vec<MetricSample>,
    pub aggregate: WindowAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClosedWindow {
    pub window: Window,
    pub streams: Vec<StreamWindow>,
    pub gaps: Vec<SensorGap>,
    pub collaboration: Vec<CollaborationEvent>,
}

impl ClosedWindow {
    /// The journaled form: aggregates without raw samples.
    pub fn summary(&self, drops: DropTally) -> serde_json::Value {
        serde_json::json!({
            "window": self.window,
            "aggregates": self.streams.iter().map(|s| &s.aggregate).collect::<Vec<_>>(),
            "gaps": self.gaps,
            "collaboration_events": self.collaboration.len(),
            "dropped": drops,
        })
    }
}

type StreamKey = (ServiceId, MetricKind);

/// Buffers ingested telemetry and hands out closed windows.
#[derive(Debug, Clone)]
pub struct Monitor {
    config: MonitorConfig,
    services: Option<BTreeSet<ServiceId>>,
    streams: BTreeMap<StreamKey, VecDeque<MetricSample>>,
    collaboration: Vec<CollaborationEvent>,
    drops: DropTally,
}

impl Monitor {
    /// `services = None` accepts any service id (offline trace analysis).
    pub fn new(config: MonitorConfig, services: Option<BTreeSet<ServiceId>>) -> Self {
        Monitor { config, services, streams: BTreeMap::new(), collaboration: Vec::new(), drops: DropTally::default() }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn drops(&self) -> DropTally {
        self.drops
    }

    fn capacity(&self) -> usize {
        (self.config.window_len as usize).saturating_mul(10).max(1)
    }

    fn known(&self, service: &ServiceId) -> bool {
        self.services.as_ref().is_none_or(|s| s.contains(service))
    }

    /// Buffers valid observations and returns how many were accepted.
    pub fn ingest(&mut self, items: impl IntoIterator<Item = Observation>) -> usize {
        let mut accepted = 0;
        for item in items {
            match item {
                Observation::Metric(sample) => {
                    if sample.service_id.as_str().is_empty() {
                        self.drops.empty_identifier += 1;
                    } else if !self.known(&sample.service_id) {
                        self.drops.unknown_service += 1;
                    } else if !sample.is_valid() {
                        self.drops.range += 1;
                    } else {
                        let cap = self.capacity();
                        let buf = self.streams.entry((sample.service_id.clone(), sample.metric)).or_default();
                        buf.push_back(sample);
                        if buf.len() > cap {
                            buf.pop_front();
                            self.drops.overflow += 1;
                            log::warn!("monitor buffer full, dropped oldest sample");
                        }
                        accepted += 1;
                    }
                }
                Observation::Collaboration(ev) => {
                    if ev.contributor_id.is_empty() || ev.service_id.as_str().is_empty() {
                        self.drops.empty_identifier += 1;
                    } else if !self.known(&ev.service_id) {
                        self.drops.unknown_service += 1;
                    } else {
                        self.collaboration.push(ev);
                        accepted += 1;
                    }
                }
            }
        }
        accepted
    }

    /// The window that closes at the end of `tick`, if any.
    pub fn window_closing_at(&self, tick: Tick) -> Option<Window> {
        let len = self.config.window_len;
        (tick + 1).is_multiple_of(len).then(|| Window { start: tick + 1 - len, end: tick + 1 })
    }

    /// Drains everything before `window.end` and aggregates the window.
    pub fn close_window(&mut self, window: Window) -> ClosedWindow {
        let mut keys: BTreeSet<StreamKey> = self.streams.keys().cloned().collect();
        if let Some(services) = &self.services {
            for s in services {
                for m in MetricKind::ALL {
                    keys.insert((s.clone(), m));
                }
            }
        }

        let mut streams = Vec::new();
        let mut gaps = Vec::new();
        for key in keys {
            let buf = self.streams.entry(key.clone()).or_default();
            let mut taken = Vec::new();
            while buf.front().is_some_and(|s| s.tick < window.end) {
                let s = buf.pop_front().expect("front checked");
                if s.tick >= window.start {
                    taken.push(s);
                }
            }
            taken.sort_by_key(|s| s.tick);
            let mut filtered = taken;
            for rule in &self.config.filters {
                filtered = apply_filter(&filtered, *rule);
            }
            match aggregate(&filtered, window) {
                Some(agg) => streams.push(StreamWindow { samples: filtered, aggregate: agg }),
                None => {
                    log::warn!("sensor gap for {}/{} in [{}, {})", key.0, key.1, window.start, window.end);
                    gaps.push(SensorGap { service_id: key.0, metric: key.1 });
                }
            }
        }

        let (inside, later): (Vec<_>, Vec<_>) =
            std::mem::take(&mut self.collaboration).into_iter().filter(|e| e.tick >= window.start).partition(|e| e.tick < window.end);
        self.collaboration = later;

        ClosedWindow { window, streams, gaps, collaboration: inside }
    }
}
