//! Identifiers and enumerations shared by every stage of the loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Simulation time, in ticks.
pub type Tick = u64;

/// Identifier of a managed microservice.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServiceId(pub String);

impl ServiceId {
    pub fn new(id: impl Into<String>) -> Self {
        ServiceId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ServiceId {
    fn from(s: &str) -> Self {
        ServiceId(s.to_string())
    }
}

/// Metrics reported by the sensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    LatencyMs,
    ErrorRate,
    CpuPct,
    MemMb,
    CertDaysRemaining,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] =
        [MetricKind::LatencyMs, MetricKind::ErrorRate, MetricKind::CpuPct, MetricKind::MemMb, MetricKind::CertDaysRemaining];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::LatencyMs => "latency_ms",
            MetricKind::ErrorRate => "error_rate",
            MetricKind::CpuPct => "cpu_pct",
            MetricKind::MemMb => "mem_mb",
            MetricKind::CertDaysRemaining => "cert_days_remaining",
        }
    }

    /// Physical range check for a reported value.
    pub fn in_range(self, value: f64) -> bool {
        if !value.is_finite() {
            return false;
        }
        match self {
            MetricKind::ErrorRate => (0.0..=1.0).contains(&value),
            MetricKind::CpuPct => (0.0..=100.0).contains(&value),
            MetricKind::MemMb | MetricKind::LatencyMs => value >= 0.0,
            MetricKind::CertDaysRemaining => true,
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| format!("unknown metric `{s}`"))
    }
}

/// Architectural layer a piece of telemetry belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Static,
    Dynamic,
    Organizational,
}

/// Desired range for one metric. Either side may be open.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl Bounds {
    pub fn max(max: f64) -> Self {
        Bounds { min: None, max: Some(max) }
    }

    pub fn min(min: f64) -> Self {
        Bounds { min: Some(min), max: None }
    }

    pub fn is_configured(&self) -> bool {
        self.min.is_some() || self.max.is_some()
    }

    pub fn well_ordered(&self) -> bool {
        match (self.min, self.max) {
            (Some(lo), Some(hi)) => lo <= hi,
            _ => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    RangeViolation,
    LevelShift,
    PointOutlier,
    MultivariateDrift,
    OrgCoupling,
    ServiceDown,
    CertExpiring,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::RangeViolation => "range_violation",
            AnomalyKind::LevelShift => "level_shift",
            AnomalyKind::PointOutlier => "point_outlier",
            AnomalyKind::MultivariateDrift => "multivariate_drift",
            AnomalyKind::OrgCoupling => "org_coupling",
            AnomalyKind::ServiceDown => "service_down",
            AnomalyKind::CertExpiring => "cert_expiring",
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What an anomaly is about: a single service or an (ordered) pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Service(ServiceId),
    Pair(ServiceId, ServiceId),
}

impl Target {
    /// The pair with its members sorted, so (a,b) and (b,a) name the same target.
    pub fn pair(a: ServiceId, b: ServiceId) -> Self {
        if a <= b {
            Target::Pair(a, b)
        } else {
            Target::Pair(b, a)
        }
    }

    pub fn services(&self) -> Vec<&ServiceId> {
        match self {
            Target::Service(s) => vec![s],
            Target::Pair(a, b) => vec![a, b],
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Service(s) => write!(f, "{s}"),
            Target::Pair(a, b) => write!(f, "{a}|{b}"),
        }
    }
}

/// Identity of an anomaly across cycles.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Signature {
    pub kind: AnomalyKind,
    pub target: Target,
}

impl Signature {
    pub fn new(kind: AnomalyKind, target: Target) -> Self {
        Signature { kind, target }
    }

    pub fn service(kind: AnomalyKind, service: &str) -> Self {
        Signature { kind, target: Target::Service(ServiceId::from(service)) }
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.kind, self.target)
    }
}
