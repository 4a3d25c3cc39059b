//! Managed system: a deterministic discrete-time microservice mesh.
//!
//! Services call their dependencies; latency excess and outages propagate
//! from callees to callers. Faults are scheduled by a scenario or injected at
//! run time, and the actuators implement the remediation action table.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{Actuator, ActuatorError, ServiceSnapshot};
use crate::planner::{ActionKind, ActionStep, InverseAction};
use crate::telemetry::{CollaborationEvent, MetricSample, Observation};
use crate::types::{MetricKind, ServiceId, Tick};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot read scenario {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid scenario: {0}")]
    Parse(String),
    #[error("duplicate service `{0}`")]
    DuplicateService(ServiceId),
    #[error("unknown service `{0}`")]
    UnknownService(ServiceId),
    #[error("dependency cycle through `{0}`")]
    Cycle(ServiceId),
    #[error("service `{service}`: {reason}")]
    Baseline { service: ServiceId, reason: String },
    #[error("fault on `{target}`: {reason}")]
    Fault { target: ServiceId, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub latency_ms: f64,
    pub error_rate: f64,
    pub cpu_pct: f64,
    pub mem_mb: f64,
    pub mem_limit_mb: f64,
    pub cert_days_remaining: f64,
}

impl Default for Baseline {
    fn default() -> Self {
        Baseline { latency_ms: 20.0, error_rate: 0.01, cpu_pct: 30.0, mem_mb: 100.0, mem_limit_mb: 200.0, cert_days_remaining: 365.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub id: ServiceId,
    #[serde(default)]
    pub depends_on: Vec<ServiceId>,
    #[serde(default)]
    pub baseline: Baseline,
    #[serde(default)]
    pub tunables: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum FaultKind {
    MemoryLeak { rate_mb_per_tick: f64 },
    LatencySpike { factor: f64 },
    Crash,
    CertDecay { days_per_tick: f64 },
}

impl FaultKind {
    fn same_kind(&self, other: &FaultKind) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    #[serde(flatten)]
    pub kind: FaultKind,
    pub target: ServiceId,
    pub start_tick: Tick,
    /// Absent means until remediated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<u64>,
}

impl FaultSpec {
    pub fn new(kind: FaultKind, target: &str, start_tick: Tick) -> Self {
        FaultSpec { kind, target: target.into(), start_tick, duration: None }
    }

    /// Whether the fault is in effect at `tick`.
    pub fn active_at(&self, tick: Tick) -> bool {
        tick >= self.start_tick && self.duration.is_none_or(|d| tick < self.start_tick + d)
    }

    fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: &str| Err(SimError::Fault { target: self.target.clone(), reason: reason.into() });
        match self.kind {
            FaultKind::MemoryLeak { rate_mb_per_tick: r } if !(r > 0.0) => bad("rate_mb_per_tick must be > 0"),
            FaultKind::LatencySpike { factor } if !(factor > 0.0) => bad("factor must be > 0"),
            FaultKind::CertDecay { days_per_tick: r } if !(r > 0.0) => bad("days_per_tick must be > 0"),
            _ if self.duration == Some(0) => bad("duration must be >= 1"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Apply,
    Revert,
}

/// Test hook: makes an actuation (or its inverse) fail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedFailure {
    pub action: ActionKind,
    pub target: ServiceId,
    #[serde(default = "default_phase")]
    pub phase: Phase,
}

fn default_phase() -> Phase {
    Phase::Apply
}

/// Scripted side effect: a successful actuation schedules a new fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reaction {
    pub action: ActionKind,
    pub target: ServiceId,
    #[serde(default = "one")]
    pub delay: u64,
    pub fault: FaultKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<u64>,
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub services: Vec<ServiceSpec>,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
    #[serde(default)]
    pub collaboration: Vec<CollaborationEvent>,
    #[serde(default)]
    pub forced_failures: Vec<ForcedFailure>,
    #[serde(default)]
    pub reactions: Vec<Reaction>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SimError::Read { path: path.display().to_string(), source })?;
        Self::from_toml(&text)
    }

    pub fn service_ids(&self) -> BTreeSet<ServiceId> {
        self.services.iter().map(|s| s.id.clone()).collect()
    }

    /// Services ordered so every callee precedes its callers.
    pub fn topological_order(&self) -> Result<Vec<ServiceId>, SimError> {
        let mut indegree: BTreeMap<&ServiceId, usize> = BTreeMap::new();
        let mut callers: BTreeMap<&ServiceId, Vec<&ServiceId>> = BTreeMap::new();
        for s in &self.services {
            if indegree.insert(&s.id, 0).is_some() {
                return Err(SimError::DuplicateService(s.id.clone()));
            }
        }
        for s in &self.services {
            for d in &s.depends_on {
                if !indegree.contains_key(d) {
                    return Err(SimError::UnknownService(d.clone()));
                }
                callers.entry(d).or_default().push(&s.id);
            }
            *indegree.get_mut(&s.id).expect("inserted above") = s.depends_on.len();
        }
        let mut ready: VecDeque<&ServiceId> = indegree.iter().filter(|(_, d)| **d == 0).map(|(s, _)| *s).collect();
        let mut order = Vec::with_capacity(self.services.len());
        while let Some(s) = ready.pop_front() {
            order.push(s.clone());
            for c in callers.get(s).into_iter().flatten() {
                let d = indegree.get_mut(c).expect("known service");
                *d -= 1;
                if *d == 0 {
                    ready.push_back(c);
                }
            }
        }
        if order.len() < self.services.len() {
            let stuck = indegree.iter().find(|(_, d)| **d > 0).map(|(s, _)| (*s).clone()).expect("some node is left");
            return Err(SimError::Cycle(stuck));
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.topological_order()?;
        for s in &self.services {
            let b = &s.baseline;
            let bad = |reason: &str| Err(SimError::Baseline { service: s.id.clone(), reason: reason.into() });
            for (metric, v) in [
                (MetricKind::LatencyMs, b.latency_ms),
                (MetricKind::ErrorRate, b.error_rate),
                (MetricKind::CpuPct, b.cpu_pct),
                (MetricKind::MemMb, b.mem_mb),
                (MetricKind::CertDaysRemaining, b.cert_days_remaining),
            ] {
                if !metric.in_range(v) {
                    return bad(&format!("baseline {metric} = {v} is out of range"));
                }
            }
            if !(b.mem_mb <= b.mem_limit_mb) {
                return bad("baseline mem_mb exceeds mem_limit_mb");
            }
        }
        let ids = self.service_ids();
        for f in &self.faults {
            if !ids.contains(&f.target) {
                return Err(SimError::UnknownService(f.target.clone()));
            }
            f.validate()?;
        }
        for r in &self.reactions {
            if !ids.contains(&r.target) {
                return Err(SimError::UnknownService(r.target.clone()));
            }
        }
        for f in &self.forced_failures {
            if !ids.contains(&f.target) {
                return Err(SimError::UnknownService(f.target.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Share of a callee's latency excess passed on to each caller.
    pub propagation: f64,
    /// Error-rate floor of a caller whose callee is down.
    pub down_error_floor: f64,
    pub noise_amplitude: f64,
    pub upgrade_downtime: u64,
    pub saturation_latency_factor: f64,
    pub rotated_cert_days: f64,
    pub clear_logs_cpu: f64,
    pub scale_out_factor: f64,
    pub default_memory_delta: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            propagation: 0.5,
            down_error_floor: 0.9,
            noise_amplitude: 0.0,
            upgrade_downtime: 3,
            saturation_latency_factor: 2.0,
            rotated_cert_days: 365.0,
            clear_logs_cpu: 5.0,
            scale_out_factor: 0.8,
            default_memory_delta: 256.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.propagation) {
            return Err("sim.propagation must be within [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.down_error_floor) {
            return Err("sim.down_error_floor must be within [0, 1]".into());
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude < 1.0) {
            return Err("sim.noise_amplitude must be within [0, 1)".into());
        }
        if !(self.scale_out_factor > 0.0 && self.scale_out_factor <= 1.0) {
            return Err("sim.scale_out_factor must be within (0, 1]".into());
        }
        Ok(())
    }
}

/// Live state of one service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceState {
    pub id: ServiceId,
    pub up: bool,
    pub latency_ms: f64,
    pub error_rate: f64,
    pub cpu_pct: f64,
    pub mem_mb: f64,
    pub mem_limit_mb: f64,
    pub cert_days_remaining: f64,
    pub latency_baseline: f64,
    pub tunables: BTreeMap<String, f64>,
    pub version: u32,
    pub key_epoch: u32,
    pub downtime_remaining: u64,
    pub active_faults: Vec<FaultSpec>,
    pub backups: u32,
}

impl ServiceState {
    pub fn saturated(&self) -> bool {
        self.mem_mb >= self.mem_limit_mb
    }

    fn snapshot(&self) -> ServiceSnapshot {
        ServiceSnapshot {
            tunables: self.tunables.clone(),
            mem_limit: self.mem_limit_mb,
            latency_baseline: self.latency_baseline,
            cert_days: self.cert_days_remaining,
            version: self.version,
            key_epoch: self.key_epoch,
        }
    }
}

pub struct SimEnv {
    config: SimConfig,
    specs: BTreeMap<ServiceId, ServiceSpec>,
    order: Vec<ServiceId>,
    /// Own (pre-propagation) state.
    own: BTreeMap<ServiceId, ServiceState>,
    /// Reported state after propagation.
    view: BTreeMap<ServiceId, ServiceState>,
    faults: Vec<FaultSpec>,
    collaboration: Vec<CollaborationEvent>,
    forced: BTreeSet<(ActionKind, ServiceId, Phase)>,
    reactions: Vec<Reaction>,
    now: Tick,
    rng: ChaCha8Rng,
}

impl SimEnv {
    pub fn new(scenario: &Scenario, config: SimConfig, seed: u64) -> Result<Self, SimError> {
        scenario.validate()?;
        let order = scenario.topological_order()?;
        let specs: BTreeMap<_, _> = scenario.services.iter().map(|s| (s.id.clone(), s.clone())).collect();
        let own = specs
            .values()
            .map(|s| {
                let b = s.baseline;
                let state = ServiceState {
                    id: s.id.clone(),
                    up: true,
                    latency_ms: b.latency_ms,
                    error_rate: b.error_rate,
                    cpu_pct: b.cpu_pct,
                    mem_mb: b.mem_mb,
                    mem_limit_mb: b.mem_limit_mb,
                    cert_days_remaining: b.cert_days_remaining,
                    latency_baseline: b.latency_ms,
                    tunables: s.tunables.clone(),
                    version: 1,
                    key_epoch: 0,
                    downtime_remaining: 0,
                    active_faults: vec![],
                    backups: 0,
                };
                (s.id.clone(), state)
            })
            .collect();
        let mut env = SimEnv {
            config,
            specs,
            order,
            own,
            view: BTreeMap::new(),
            faults: scenario.faults.clone(),
            collaboration: scenario.collaboration.clone(),
            forced: scenario.forced_failures.iter().map(|f| (f.action, f.target.clone(), f.phase)).collect(),
            reactions: scenario.reactions.clone(),
            now: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.refresh();
        Ok(env)
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn service_ids(&self) -> BTreeSet<ServiceId> {
        self.specs.keys().cloned().collect()
    }

    pub fn spec(&self, id: &ServiceId) -> Option<&ServiceSpec> {
        self.specs.get(id)
    }

    /// Reported (post-propagation) state of a service.
    pub fn state(&self, id: &ServiceId) -> Option<&ServiceState> {
        self.view.get(id)
    }

    pub fn states(&self) -> impl Iterator<Item = &ServiceState> {
        self.view.values()
    }

    /// Schedules a fault. A fault starting now takes effect immediately.
    pub fn inject(&mut self, fault: FaultSpec) -> Result<(), SimError> {
        if !self.specs.contains_key(&fault.target) {
            return Err(SimError::UnknownService(fault.target.clone()));
        }
        fault.validate()?;
        if fault.start_tick < self.now {
            return Err(SimError::Fault {
                target: fault.target.clone(),
                reason: format!("start_tick {} is in the past", fault.start_tick),
            });
        }
        self.faults.push(fault);
        self.refresh();
        Ok(())
    }

    pub fn set_forced_failure(&mut self, action: ActionKind, target: &str, phase: Phase, on: bool) {
        let key = (action, ServiceId::from(target), phase);
        if on {
            self.forced.insert(key);
        } else {
            self.forced.remove(&key);
        }
    }

    /// Advances time one tick and applies the faults in effect.
    pub fn tick(&mut self) -> Tick {
        self.now += 1;
        let now = self.now;
        for state in self.own.values_mut() {
            state.downtime_remaining = state.downtime_remaining.saturating_sub(1);
        }
        for f in &self.faults {
            if !(f.active_at(now) && now > f.start_tick) {
                continue;
            }
            let Some(s) = self.own.get_mut(&f.target) else { continue };
            match f.kind {
                FaultKind::MemoryLeak { rate_mb_per_tick } => s.mem_mb = (s.mem_mb + rate_mb_per_tick).min(s.mem_limit_mb),
                FaultKind::CertDecay { days_per_tick } => s.cert_days_remaining -= days_per_tick,
                FaultKind::LatencySpike { .. } | FaultKind::Crash => {}
            }
        }
        self.refresh();
        now
    }

    /// Recomputes the reported view from own state and active faults.
    fn refresh(&mut self) {
        let now = self.now;
        for s in self.own.values_mut() {
            s.active_faults = self.faults.iter().filter(|f| f.target == s.id && f.active_at(now)).cloned().collect();
            let crashed = s.active_faults.iter().any(|f| matches!(f.kind, FaultKind::Crash));
            s.up = !crashed && s.downtime_remaining == 0;
            let spike: f64 = s
                .active_faults
                .iter()
                .filter_map(|f| match f.kind {
                    FaultKind::LatencySpike { factor } => Some(factor),
                    _ => None,
                })
                .product();
            let saturation = if s.saturated() { self.config.saturation_latency_factor } else { 1.0 };
            s.latency_ms = s.latency_baseline * spike * saturation;
        }
        let mut view: BTreeMap<ServiceId, ServiceState> = BTreeMap::new();
        for id in &self.order {
            let mut s = self.own[id].clone();
            let spec = &self.specs[id];
            let mut excess = 0.0;
            let mut callee_down = false;
            for d in &spec.depends_on {
                let callee = &view[d];
                excess += (callee.latency_ms - callee.latency_baseline).max(0.0);
                callee_down |= !callee.up;
            }
            s.latency_ms += self.config.propagation * excess;
            if !s.up {
                s.error_rate = 1.0;
            } else if callee_down {
                s.error_rate = s.error_rate.max(self.config.down_error_floor);
            }
            view.insert(id.clone(), s);
        }
        self.view = view;
    }

    /// One sample per service per metric at the current tick, plus any
    /// scripted collaboration events for this tick.
    pub fn sense(&mut self) -> Vec<Observation> {
        let now = self.now;
        let amplitude = self.config.noise_amplitude;
        let mut out = Vec::with_capacity(self.view.len() * MetricKind::ALL.len());
        for s in self.view.values() {
            for metric in MetricKind::ALL {
                let mut value = match metric {
                    MetricKind::LatencyMs => s.latency_ms,
                    MetricKind::ErrorRate => s.error_rate,
                    MetricKind::CpuPct => s.cpu_pct,
                    MetricKind::MemMb => s.mem_mb,
                    MetricKind::CertDaysRemaining => s.cert_days_remaining,
                };
                if amplitude > 0.0 {
                    value *= 1.0 + amplitude * self.rng.random_range(-1.0..=1.0);
                    value = match metric {
                        MetricKind::ErrorRate => value.clamp(0.0, 1.0),
                        MetricKind::CpuPct => value.clamp(0.0, 100.0),
                        MetricKind::LatencyMs | MetricKind::MemMb => value.max(0.0),
                        MetricKind::CertDaysRemaining => value,
                    };
                }
                out.push(Observation::Metric(MetricSample::new(s.id.as_str(), metric, value, now)));
            }
        }
        out.extend(self.collaboration.iter().filter(|e| e.tick == now).cloned().map(Observation::Collaboration));
        out
    }

    fn clear_faults(&mut self, target: &ServiceId, pred: impl Fn(&FaultKind) -> bool) {
        let now = self.now;
        self.faults.retain(|f| !(f.target == *target && f.start_tick <= now && pred(&f.kind)));
    }

    fn fire_reactions(&mut self, action: ActionKind, target: &ServiceId) {
        let now = self.now;
        let due: Vec<FaultSpec> = self
            .reactions
            .iter()
            .filter(|r| r.action == action && &r.target == target)
            .map(|r| FaultSpec { kind: r.fault, target: r.target.clone(), start_tick: now + r.delay, duration: r.duration })
            .collect();
        self.faults.extend(due);
    }
}

impl Actuator for SimEnv {
    fn has_service(&self, service: &ServiceId) -> bool {
        self.specs.contains_key(service)
    }

    fn snapshot(&self, service: &ServiceId) -> Option<ServiceSnapshot> {
        self.own.get(service).map(ServiceState::snapshot)
    }

    fn actuate(&mut self, step: &ActionStep) -> Result<(), ActuatorError> {
        let target = step.target.clone();
        if !self.specs.contains_key(&target) {
            return Err(ActuatorError(format!("unknown service {target}")));
        }
        if self.forced.contains(&(step.action_kind, target.clone(), Phase::Apply)) {
            return Err(ActuatorError("injected".into()));
        }
        let baseline = self.specs[&target].baseline;
        let spike = FaultKind::LatencySpike { factor: 1.0 };
        let leak = FaultKind::MemoryLeak { rate_mb_per_tick: 1.0 };
        let decay = FaultKind::CertDecay { days_per_tick: 1.0 };
        match step.action_kind {
            ActionKind::RestartService => {
                self.clear_faults(&target, |k| k.same_kind(&leak) || matches!(k, FaultKind::Crash));
                let s = self.own.get_mut(&target).expect("checked");
                s.mem_mb = baseline.mem_mb.min(s.mem_limit_mb);
                s.downtime_remaining = 0;
            }
            ActionKind::IncreaseMemory => {
                let delta = step.params.get("delta").and_then(|v| v.as_f64()).unwrap_or(self.config.default_memory_delta);
                if !(delta > 0.0) {
                    return Err(ActuatorError(format!("increase_memory needs delta > 0, got {delta}")));
                }
                self.own.get_mut(&target).expect("checked").mem_limit_mb += delta;
            }
            ActionKind::TuneParameter => {
                let name = step.params.get("name").and_then(|v| v.as_str()).unwrap_or("timeout").to_string();
                let s = self.own.get_mut(&target).expect("checked");
                let value = step.params.get("value").and_then(|v| v.as_f64()).or_else(|| s.tunables.get(&name).copied()).unwrap_or(0.0);
                s.tunables.insert(name.clone(), value);
                if name == "timeout" {
                    self.clear_faults(&target, |k| k.same_kind(&spike));
                }
            }
            ActionKind::ClearLogs => {
                let floor = self.config.clear_logs_cpu;
                let s = self.own.get_mut(&target).expect("checked");
                s.cpu_pct = (s.cpu_pct - floor).max(baseline.cpu_pct);
            }
            ActionKind::RotateCertificate => {
                self.clear_faults(&target, |k| k.same_kind(&decay));
                self.own.get_mut(&target).expect("checked").cert_days_remaining = self.config.rotated_cert_days;
            }
            ActionKind::UpgradeService => {
                self.clear_faults(&target, |_| true);
                let downtime = self.config.upgrade_downtime;
                let s = self.own.get_mut(&target).expect("checked");
                s.mem_mb = baseline.mem_mb.min(s.mem_limit_mb);
                s.cpu_pct = baseline.cpu_pct;
                s.error_rate = baseline.error_rate;
                s.version += 1;
                s.downtime_remaining = downtime;
            }
            ActionKind::Backup => self.own.get_mut(&target).expect("checked").backups += 1,
            ActionKind::ScaleOut => {
                let factor = self.config.scale_out_factor;
                self.own.get_mut(&target).expect("checked").latency_baseline *= factor;
            }
            ActionKind::RedistributeKeys => self.own.get_mut(&target).expect("checked").key_epoch += 1,
        }
        self.fire_reactions(step.action_kind, &target);
        self.refresh();
        Ok(())
    }

    fn revert(&mut self, step: &ActionStep, inverse: &InverseAction, snapshot: &ServiceSnapshot) -> Result<(), ActuatorError> {
        if self.forced.contains(&(step.action_kind, step.target.clone(), Phase::Revert)) {
            return Err(ActuatorError("injected".into()));
        }
        let s = self.own.get_mut(&step.target).ok_or_else(|| ActuatorError(format!("unknown service {}", step.target)))?;
        match inverse {
            InverseAction::Tunable { name } => match snapshot.tunables.get(name) {
                Some(v) => {
                    s.tunables.insert(name.clone(), *v);
                }
                None => {
                    s.tunables.remove(name);
                }
            },
            InverseAction::MemLimit => {
                s.mem_limit_mb = snapshot.mem_limit;
                s.mem_mb = s.mem_mb.min(s.mem_limit_mb);
            }
            InverseAction::LatencyBaseline => s.latency_baseline = snapshot.latency_baseline,
            InverseAction::Certificate => s.cert_days_remaining = snapshot.cert_days,
            InverseAction::Version => s.version = snapshot.version,
            InverseAction::KeyEpoch => s.key_epoch = snapshot.key_epoch,
        }
        self.refresh();
        Ok(())
    }
}
