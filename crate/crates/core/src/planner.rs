//! Plan stage: the policy agent, risk classification and the autonomic gate.
//!
//! Every action kind has a fixed risk class. Only high-risk steps contribute
//! to a plan's weighted sum `A`, and a plan whose `A` reaches the autonomic
//! threshold `alpha` must be approved by a human before anything is applied.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::detectors::AnomalyReport;
use crate::executor::EscalationReason;
use crate::knowledge::KbState;
use crate::types::{AnomalyKind, Bounds, MetricKind, ServiceId, Signature, Target};

/// Desired state of the managed system.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoalSpec {
    /// Metric order used when several anomalies compete in one cycle.
    #[serde(default)]
    pub priorities: Vec<MetricKind>,
    #[serde(flatten)]
    pub services: BTreeMap<ServiceId, BTreeMap<MetricKind, Bounds>>,
}

impl GoalSpec {
    pub fn set(&mut self, service: &str, metric: MetricKind, bounds: Bounds) {
        self.services.entry(service.into()).or_default().insert(metric, bounds);
    }

    /// Configured bounds, if any side is set.
    pub fn bounds(&self, service: &ServiceId, metric: MetricKind) -> Option<Bounds> {
        self.services.get(service)?.get(&metric).copied().filter(Bounds::is_configured)
    }

    pub fn priority_rank(&self, metric: Option<MetricKind>) -> usize {
        metric.and_then(|m| self.priorities.iter().position(|p| *p == m)).unwrap_or(self.priorities.len())
    }

    pub fn validate(&self) -> Result<(), String> {
        for (svc, metrics) in &self.services {
            for (m, b) in metrics {
                if !b.well_ordered() {
                    return Err(format!("goals.{svc}.{m}: min > max"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RiskClass {
    LR,
    MR,
    HR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskSubtype {
    CertMgmt,
    SysUpgrade,
    KeyDist,
}

impl RiskSubtype {
    pub const ALL: [RiskSubtype; 3] = [RiskSubtype::CertMgmt, RiskSubtype::SysUpgrade, RiskSubtype::KeyDist];

    pub fn as_str(self) -> &'static str {
        match self {
            RiskSubtype::CertMgmt => "cert_mgmt",
            RiskSubtype::SysUpgrade => "sys_upgrade",
            RiskSubtype::KeyDist => "key_dist",
        }
    }
}

/// The registered remediation actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    TuneParameter,
    ClearLogs,
    IncreaseMemory,
    RestartService,
    Backup,
    ScaleOut,
    RotateCertificate,
    UpgradeService,
    RedistributeKeys,
}

impl ActionKind {
    pub const ALL: [ActionKind; 9] = [
        ActionKind::TuneParameter,
        ActionKind::ClearLogs,
        ActionKind::IncreaseMemory,
        ActionKind::RestartService,
        ActionKind::Backup,
        ActionKind::ScaleOut,
        ActionKind::RotateCertificate,
        ActionKind::UpgradeService,
        ActionKind::RedistributeKeys,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::TuneParameter => "tune_parameter",
            ActionKind::ClearLogs => "clear_logs",
            ActionKind::IncreaseMemory => "increase_memory",
            ActionKind::RestartService => "restart_service",
            ActionKind::Backup => "backup",
            ActionKind::ScaleOut => "scale_out",
            ActionKind::RotateCertificate => "rotate_certificate",
            ActionKind::UpgradeService => "upgrade_service",
            ActionKind::RedistributeKeys => "redistribute_keys",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown action kind `{0}`; register it before planning with it")]
pub struct UnknownActionKind(pub String);

impl FromStr for ActionKind {
    type Err = UnknownActionKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActionKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| UnknownActionKind(s.to_string()))
    }
}

/// Fixed risk registry.
pub fn classify_risk(kind: ActionKind) -> (RiskClass, Option<RiskSubtype>) {
    match kind {
        ActionKind::TuneParameter | ActionKind::ClearLogs => (RiskClass::LR, None),
        ActionKind::IncreaseMemory | ActionKind::RestartService | ActionKind::Backup | ActionKind::ScaleOut => (RiskClass::MR, None),
        ActionKind::RotateCertificate => (RiskClass::HR, Some(RiskSubtype::CertMgmt)),
        ActionKind::UpgradeService => (RiskClass::HR, Some(RiskSubtype::SysUpgrade)),
        ActionKind::RedistributeKeys => (RiskClass::HR, Some(RiskSubtype::KeyDist)),
    }
}

/// Classifies an action named by string; unknown names are rejected.
pub fn classify_action(name: &str) -> Result<(ActionKind, RiskClass, Option<RiskSubtype>), UnknownActionKind> {
    let kind: ActionKind = name.parse()?;
    let (class, subtype) = classify_risk(kind);
    Ok((kind, class, subtype))
}

/// Which state field an inverse restores from the pre-plan snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "restore", rename_all = "snake_case")]
pub enum InverseAction {
    Tunable { name: String },
    MemLimit,
    LatencyBaseline,
    Certificate,
    Version,
    KeyEpoch,
}

/// `None` for the kinds that are safe to leave applied (restart, backup, clear_logs).
pub fn inverse_for(kind: ActionKind, params: &Value) -> Option<InverseAction> {
    match kind {
        ActionKind::TuneParameter => {
            Some(InverseAction::Tunable { name: params.get("name").and_then(Value::as_str).unwrap_or("timeout").to_string() })
        }
        ActionKind::IncreaseMemory => Some(InverseAction::MemLimit),
        ActionKind::ScaleOut => Some(InverseAction::LatencyBaseline),
        ActionKind::RotateCertificate => Some(InverseAction::Certificate),
        ActionKind::UpgradeService => Some(InverseAction::Version),
        ActionKind::RedistributeKeys => Some(InverseAction::KeyEpoch),
        ActionKind::RestartService | ActionKind::Backup | ActionKind::ClearLogs => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionStep {
    pub step_id: String,
    pub action_kind: ActionKind,
    pub target: ServiceId,
    pub params: Value,
    pub risk_class: RiskClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risk_subtype: Option<RiskSubtype>,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inverse: Option<InverseAction>,
}

impl ActionStep {
    /// Builds a classified step. HR steps take their subtype's weight.
    pub fn new(step_id: impl Into<String>, kind: ActionKind, target: ServiceId, params: Value, weights: &SubtypeWeights) -> Self {
        let (risk_class, risk_subtype) = classify_risk(kind);
        let weight = risk_subtype.and_then(|s| weights.get(&s).copied()).unwrap_or(1.0);
        let inverse = inverse_for(kind, &params);
        ActionStep { step_id: step_id.into(), action_kind: kind, target, params, risk_class, risk_subtype, weight, inverse }
    }
}

/// The playbook: ordered, classified steps for one anomaly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPlan {
    pub plan_id: String,
    pub anomaly_refs: Vec<String>,
    pub signature: Signature,
    pub template_id: String,
    pub steps: Vec<ActionStep>,
    pub impact_estimate: f64,
    pub rank_score: f64,
}

impl ActionPlan {
    pub fn hr_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.risk_class == RiskClass::HR).count()
    }

    pub fn targets(&self) -> BTreeSet<ServiceId> {
        self.steps.iter().map(|s| s.target.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepClass {
    pub step_id: String,
    pub risk_class: RiskClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAssessment {
    pub plan_id: String,
    /// Weighted sum of the plan's HR steps.
    pub hr_weighted_sum: f64,
    pub alpha: f64,
    pub gated: bool,
    pub step_classes: Vec<StepClass>,
}

pub type SubtypeWeights = BTreeMap<RiskSubtype, f64>;

pub fn default_weights() -> SubtypeWeights {
    RiskSubtype::ALL.into_iter().map(|s| (s, 1.0)).collect()
}

/// Sum of subtype weights over the HR steps; zero when there are none.
pub fn hr_weighted_sum(steps: &[ActionStep], weights: &SubtypeWeights) -> f64 {
    steps
        .iter()
        .filter(|s| s.risk_class == RiskClass::HR)
        .map(|s| s.risk_subtype.and_then(|t| weights.get(&t).copied()).unwrap_or(s.weight))
        .fold(0.0, |acc, w| acc + w)
}

/// Compares the plan's weighted HR sum with `alpha`; gated when `A >= alpha`.
pub fn assess(plan: &ActionPlan, alpha: f64, weights: &SubtypeWeights) -> RiskAssessment {
    let a = hr_weighted_sum(&plan.steps, weights);
    RiskAssessment {
        plan_id: plan.plan_id.clone(),
        hr_weighted_sum: a,
        alpha,
        gated: a >= alpha,
        step_classes: plan.steps.iter().map(|s| StepClass { step_id: s.step_id.clone(), risk_class: s.risk_class }).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTemplate {
    pub action: ActionKind,
    #[serde(default = "empty_params")]
    pub params: Value,
}

fn empty_params() -> Value {
    json!({})
}

/// A remediation recipe for one anomaly kind (optionally one metric).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTemplate {
    pub id: String,
    pub kind: AnomalyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
    pub impact: f64,
    pub steps: Vec<StepTemplate>,
}

fn step(action: ActionKind, params: Value) -> StepTemplate {
    StepTemplate { action, params }
}

fn template(id: &str, kind: AnomalyKind, metric: Option<MetricKind>, impact: f64, steps: Vec<StepTemplate>) -> PlanTemplate {
    PlanTemplate { id: id.into(), kind, metric, impact, steps }
}

pub fn default_templates() -> Vec<PlanTemplate> {
    use ActionKind::*;
    use AnomalyKind::*;
    use MetricKind::*;
    let tune_timeout = || step(TuneParameter, json!({"name": "timeout", "value": 500.0}));
    let add_memory = || step(IncreaseMemory, json!({"delta": 256.0}));
    vec![
        template("mem-increase", LevelShift, Some(MemMb), 0.8, vec![add_memory()]),
        template("mem-restart", LevelShift, Some(MemMb), 1.0, vec![step(RestartService, json!({}))]),
        template("latency-shift-timeout", LevelShift, Some(LatencyMs), 0.6, vec![tune_timeout()]),
        template("cpu-shift-scale", LevelShift, Some(CpuPct), 0.7, vec![step(ScaleOut, json!({}))]),
        template("errors-shift-restart", LevelShift, Some(ErrorRate), 0.9, vec![step(RestartService, json!({}))]),
        template("down-restart", ServiceDown, None, 1.0, vec![step(RestartService, json!({}))]),
        template("cert-rotate", CertExpiring, None, 1.0, vec![step(Backup, json!({})), step(RotateCertificate, json!({}))]),
        template("latency-outlier-timeout", PointOutlier, Some(LatencyMs), 0.6, vec![tune_timeout()]),
        template("latency-range-timeout", RangeViolation, Some(LatencyMs), 0.6, vec![tune_timeout()]),
        template("mem-range-increase", RangeViolation, Some(MemMb), 0.8, vec![add_memory()]),
        template("cpu-range-scale", RangeViolation, Some(CpuPct), 0.7, vec![step(ScaleOut, json!({}))]),
        template("errors-range-restart", RangeViolation, Some(ErrorRate), 0.9, vec![step(RestartService, json!({}))]),
        template("drift-tune-backup", MultivariateDrift, None, 0.5, vec![tune_timeout(), step(Backup, json!({}))]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    pub alpha: f64,
    pub weights: SubtypeWeights,
    pub risk_penalty: f64,
    pub templates: Vec<PlanTemplate>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig { alpha: 1.0, weights: default_weights(), risk_penalty: 0.5, templates: default_templates() }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err("plan.alpha must be a positive number".into());
        }
        for s in RiskSubtype::ALL {
            match self.weights.get(&s) {
                Some(w) if *w > 0.0 && w.is_finite() => {}
                Some(_) => return Err(format!("plan.weights.{} must be > 0", s.as_str())),
                None => return Err(format!("plan.weights.{} is missing", s.as_str())),
            }
        }
        if !(self.risk_penalty >= 0.0) {
            return Err("plan.risk_penalty must be >= 0".into());
        }
        let mut ids = BTreeSet::new();
        for t in &self.templates {
            if !ids.insert(&t.id) {
                return Err(format!("plan.templates: duplicate id `{}`", t.id));
            }
            if t.steps.is_empty() {
                return Err(format!("plan.templates.{}: a template needs at least one step", t.id));
            }
            if !t.impact.is_finite() {
                return Err(format!("plan.templates.{}: impact must be finite", t.id));
            }
            if t.kind == AnomalyKind::OrgCoupling {
                return Err(format!("plan.templates.{}: org_coupling anomalies are escalated, not planned", t.id));
            }
        }
        Ok(())
    }
}

/// What the agent decided to do about an anomaly.
#[derive(Debug, Clone, PartialEq)]
pub enum Formulation {
    Plans(Vec<ActionPlan>),
    Escalate(EscalationReason),
}

/// A pluggable planning policy.
pub trait PolicyAgent: Send {
    fn formulate(&self, anomaly: &AnomalyReport, goals: &GoalSpec, kb: &KbState) -> Formulation;

    /// Orders candidate plans best-first and fills in their rank scores.
    fn rank(&self, plans: Vec<ActionPlan>) -> Vec<ActionPlan>;
}

/// Deterministic template-table agent.
#[derive(Debug, Clone)]
pub struct RuleAgent {
    config: PlanConfig,
}

impl RuleAgent {
    pub fn new(config: PlanConfig) -> Self {
        RuleAgent { config }
    }

    fn matching_templates(&self, anomaly: &AnomalyReport) -> Vec<&PlanTemplate> {
        let kind = anomaly.signature.kind;
        let specific: Vec<_> =
            self.config.templates.iter().filter(|t| t.kind == kind && t.metric.is_some() && t.metric == anomaly.metric).collect();
        if !specific.is_empty() {
            return specific;
        }
        self.config.templates.iter().filter(|t| t.kind == kind && t.metric.is_none()).collect()
    }

    fn instantiate(&self, anomaly: &AnomalyReport, template: &PlanTemplate, target: &ServiceId) -> ActionPlan {
        let plan_id = format!("plan-{}-{}", anomaly.id, template.id);
        let steps = template
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| ActionStep::new(format!("{plan_id}/s{i}"), s.action, target.clone(), s.params.clone(), &self.config.weights))
            .collect();
        ActionPlan {
            plan_id,
            anomaly_refs: vec![anomaly.id.clone()],
            signature: anomaly.signature.clone(),
            template_id: template.id.clone(),
            steps,
            impact_estimate: template.impact,
            rank_score: template.impact,
        }
    }
}

impl PolicyAgent for RuleAgent {
    fn formulate(&self, anomaly: &AnomalyReport, _goals: &GoalSpec, _kb: &KbState) -> Formulation {
        let target = match &anomaly.signature.target {
            Target::Service(s) => s,
            Target::Pair(..) => return Formulation::Escalate(EscalationReason::OrgCoupling),
        };
        if anomaly.signature.kind == AnomalyKind::OrgCoupling {
            return Formulation::Escalate(EscalationReason::OrgCoupling);
        }
        let templates = self.matching_templates(anomaly);
        if templates.is_empty() {
            return Formulation::Escalate(EscalationReason::NoTemplate);
        }
        Formulation::Plans(templates.into_iter().map(|t| self.instantiate(anomaly, t, target)).collect())
    }

    fn rank(&self, plans: Vec<ActionPlan>) -> Vec<ActionPlan> {
        rank_plans(plans, &self.config.weights, self.config.risk_penalty)
    }
}

/// Scores plans by `impact - penalty * A` and sorts best-first.
///
/// Ties go to the plan with fewer HR steps, then to the smaller plan id.
pub fn rank_plans(plans: Vec<ActionPlan>, weights: &SubtypeWeights, risk_penalty: f64) -> Vec<ActionPlan> {
    let mut plans: Vec<ActionPlan> = plans
        .into_iter()
        .map(|mut p| {
            p.rank_score = p.impact_estimate - risk_penalty * hr_weighted_sum(&p.steps, weights);
            p
        })
        .collect();
    plans.sort_by(|a, b| {
        b.rank_score.total_cmp(&a.rank_score).then(a.hr_steps().cmp(&b.hr_steps())).then_with(|| a.plan_id.cmp(&b.plan_id))
    });
    plans
}
