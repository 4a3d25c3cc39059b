//! Execute stage: actuation, rollback, the approval queue and the loop guard.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::knowledge::{EntryKind, Journal, KbError, NewEntry, Outcome};
use crate::planner::{ActionPlan, ActionStep, InverseAction, RiskAssessment};
use crate::types::{ServiceId, Signature, Tick};

/// Mutable per-service state that inverses restore.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServiceSnapshot {
    pub tunables: BTreeMap<String, f64>,
    pub mem_limit: f64,
    pub latency_baseline: f64,
    pub cert_days: f64,
    pub version: u32,
    pub key_epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{0}")]
pub struct ActuatorError(pub String);

/// The effector side of the managed system.
pub trait Actuator {
    fn has_service(&self, service: &ServiceId) -> bool;
    fn snapshot(&self, service: &ServiceId) -> Option<ServiceSnapshot>;
    fn actuate(&mut self, step: &ActionStep) -> Result<(), ActuatorError>;
    /// Restores the fields named by `inverse` from `snapshot`.
    fn revert(&mut self, step: &ActionStep, inverse: &InverseAction, snapshot: &ServiceSnapshot) -> Result<(), ActuatorError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApprovalStatus {
    Pending,
    Approved,
    Rejected,
    Expired,
}

impl ApprovalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ApprovalStatus::Pending => "pending",
            ApprovalStatus::Approved => "approved",
            ApprovalStatus::Rejected => "rejected",
            ApprovalStatus::Expired => "expired",
        }
    }

    pub fn is_terminal(self) -> bool {
        self != ApprovalStatus::Pending
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalRequest {
    pub request_id: String,
    pub plan_id: String,
    pub signature: Signature,
    pub assessment: RiskAssessment,
    pub status: ApprovalStatus,
    pub requested_tick: Tick,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_tick: Option<Tick>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decider: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Approved,
    Rejected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStatus {
    Completed,
    RolledBack,
    RollbackFailed,
    Rejected,
    Expired,
    /// A step named a service the actuator does not know; nothing was applied.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub plan_id: String,
    pub applied_steps: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_step: Option<String>,
    pub rolled_back: bool,
    pub final_status: FinalStatus,
}

impl ExecutionResult {
    fn untouched(plan_id: &str, final_status: FinalStatus) -> Self {
        ExecutionResult { plan_id: plan_id.to_string(), applied_steps: vec![], failed_step: None, rolled_back: false, final_status }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Execution {
    Done(ExecutionResult),
    Pending(ApprovalRequest),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationReason {
    NoTemplate,
    OrgCoupling,
    LoopSuppressed,
    RollbackFailed,
    UnknownTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Escalation {
    pub escalation_id: String,
    pub reason: EscalationReason,
    pub signature: Option<Signature>,
    pub plan_id: Option<String>,
    pub detail: String,
    pub tick: Tick,
    pub acknowledged: bool,
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Journal(#[from] KbError),
    #[error("no approval request `{0}`")]
    NotFound(String),
    #[error("approval request `{id}` is already {status}")]
    Terminal { id: String, status: &'static str },
    #[error("decider must be a non-empty identifier")]
    EmptyDecider,
    #[error("no escalation `{0}`")]
    UnknownEscalation(String),
    #[error("escalation `{0}` was already acknowledged")]
    AlreadyAcknowledged(String),
}

/// Loop-guard parameters: repeat limit `l` within the last `n` cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopGuardParams {
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "N")]
    pub n: u64,
}

impl Default for LoopGuardParams {
    fn default() -> Self {
        LoopGuardParams { l: 3, n: 10 }
    }
}

impl LoopGuardParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.l < 2 {
            return Err("execute.loop_guard.L must be >= 2".into());
        }
        if self.n < self.l as u64 {
            return Err("execute.loop_guard.N must be >= L".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occurrence {
    pub cycle: u64,
    pub remediated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardVerdict {
    Proceed,
    Suppressed,
}

/// Detects signatures that keep coming back right after being remediated.
#[derive(Debug, Clone, Default)]
pub struct LoopGuard {
    params: LoopGuardParams,
    history: BTreeMap<Signature, Vec<Occurrence>>,
}

impl LoopGuard {
    pub fn new(params: LoopGuardParams) -> Self {
        LoopGuard { params, history: BTreeMap::new() }
    }

    pub fn history(&self, signature: &Signature) -> &[Occurrence] {
        self.history.get(signature).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Records an occurrence at `cycle` and decides whether to act on it.
    ///
    /// Suppressed when this occurrence, together with the unbroken run of
    /// remediated occurrences right before it, spans at least `L` distinct
    /// cycles of the last `N`.
    pub fn check(&mut self, signature: &Signature, cycle: u64) -> GuardVerdict {
        let n = self.params.n;
        let occ = self.history.entry(signature.clone()).or_default();
        occ.retain(|o| o.cycle + n > cycle);
        if !occ.iter().any(|o| o.cycle == cycle) {
            occ.push(Occurrence { cycle, remediated: false });
            occ.sort_by_key(|o| o.cycle);
        }
        let chain = occ.iter().rev().filter(|o| o.cycle < cycle).take_while(|o| o.remediated).count();
        if 1 + chain >= self.params.l {
            GuardVerdict::Suppressed
        } else {
            GuardVerdict::Proceed
        }
    }

    pub fn mark_remediated(&mut self, signature: &Signature, cycle: u64) {
        if let Some(o) = self.history.get_mut(signature).and_then(|v| v.iter_mut().find(|o| o.cycle == cycle)) {
            o.remediated = true;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecuteConfig {
    pub approval_ttl: u64,
    pub loop_guard: LoopGuardParams,
}

impl Default for ExecuteConfig {
    fn default() -> Self {
        ExecuteConfig { approval_ttl: 50, loop_guard: LoopGuardParams::default() }
    }
}

impl ExecuteConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.approval_ttl == 0 {
            return Err("execute.approval_ttl must be >= 1".into());
        }
        self.loop_guard.validate()
    }
}

/// Where in time an executor call happens, for journaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Clock {
    pub cycle: u64,
    pub tick: Tick,
}

#[derive(Debug, Clone)]
struct PendingPlan {
    plan: ActionPlan,
    cycle: u64,
}

pub struct Executor {
    config: ExecuteConfig,
    guard: LoopGuard,
    approvals: BTreeMap<String, ApprovalRequest>,
    gated_plans: BTreeMap<String, PendingPlan>,
    escalations: BTreeMap<String, Escalation>,
    frozen_signatures: BTreeMap<Signature, String>,
    frozen_services: BTreeMap<ServiceId, String>,
}

impl Executor {
    pub fn new(config: ExecuteConfig) -> Self {
        Executor {
            guard: LoopGuard::new(config.loop_guard),
            config,
            approvals: BTreeMap::new(),
            gated_plans: BTreeMap::new(),
            escalations: BTreeMap::new(),
            frozen_signatures: BTreeMap::new(),
            frozen_services: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &ExecuteConfig {
        &self.config
    }

    pub fn guard(&self) -> &LoopGuard {
        &self.guard
    }

    pub fn approvals(&self) -> impl Iterator<Item = &ApprovalRequest> {
        self.approvals.values()
    }

    pub fn approval(&self, request_id: &str) -> Option<&ApprovalRequest> {
        self.approvals.get(request_id)
    }

    pub fn pending(&self) -> Vec<&ApprovalRequest> {
        self.approvals.values().filter(|a| a.status == ApprovalStatus::Pending).collect()
    }

    pub fn has_pending_for(&self, signature: &Signature) -> bool {
        self.approvals.values().any(|a| a.status == ApprovalStatus::Pending && &a.signature == signature)
    }

    pub fn escalations(&self) -> impl Iterator<Item = &Escalation> {
        self.escalations.values()
    }

    pub fn is_signature_frozen(&self, signature: &Signature) -> bool {
        self.frozen_signatures.contains_key(signature)
    }

    pub fn is_service_frozen(&self, service: &ServiceId) -> bool {
        self.frozen_services.contains_key(service)
    }

    pub fn frozen_services(&self) -> BTreeSet<ServiceId> {
        self.frozen_services.keys().cloned().collect()
    }

    /// Runs the loop guard for an anomaly seen at `clock.cycle`. Suppression
    /// journals an escalation and freezes the signature until acknowledged.
    pub fn loop_guard(&mut self, journal: &mut Journal, clock: Clock, signature: &Signature) -> Result<GuardVerdict, ExecError> {
        let verdict = self.guard.check(signature, clock.cycle);
        if verdict == GuardVerdict::Suppressed {
            let cycles: Vec<u64> = self.guard.history(signature).iter().map(|o| o.cycle).collect();
            let id = self.escalate(
                journal,
                clock,
                EscalationReason::LoopSuppressed,
                Some(signature.clone()),
                None,
                format!("{signature} recurred after remediation in cycles {cycles:?}"),
            )?;
            self.frozen_signatures.insert(signature.clone(), id);
        }
        Ok(verdict)
    }

    /// Journals a human escalation and returns its id.
    pub fn escalate(
        &mut self,
        journal: &mut Journal,
        clock: Clock,
        reason: EscalationReason,
        signature: Option<Signature>,
        plan_id: Option<String>,
        detail: String,
    ) -> Result<String, ExecError> {
        let escalation_id = format!("esc-{}", journal.next_seq());
        let esc =
            Escalation { escalation_id: escalation_id.clone(), reason, signature, plan_id, detail, tick: clock.tick, acknowledged: false };
        journal.append(NewEntry::new(clock.cycle, clock.tick, EntryKind::Escalation, to_value(&esc)))?;
        self.escalations.insert(escalation_id.clone(), esc);
        Ok(escalation_id)
    }

    /// Human acknowledgement of an escalation; lifts any freeze it caused.
    pub fn acknowledge(&mut self, journal: &mut Journal, clock: Clock, escalation_id: &str, by: &str) -> Result<(), ExecError> {
        if by.trim().is_empty() {
            return Err(ExecError::EmptyDecider);
        }
        let esc = self.escalations.get_mut(escalation_id).ok_or_else(|| ExecError::UnknownEscalation(escalation_id.into()))?;
        if esc.acknowledged {
            return Err(ExecError::AlreadyAcknowledged(escalation_id.into()));
        }
        journal.append(NewEntry::new(clock.cycle, clock.tick, EntryKind::Feedback, json!({"acknowledged": escalation_id, "by": by})))?;
        esc.acknowledged = true;
        self.frozen_signatures.retain(|_, id| id != escalation_id);
        self.frozen_services.retain(|_, id| id != escalation_id);
        Ok(())
    }

    /// Applies an assessed plan, or parks it behind an approval request when gated.
    pub fn execute(
        &mut self,
        journal: &mut Journal,
        actuator: &mut dyn Actuator,
        clock: Clock,
        plan: &ActionPlan,
        assessment: &RiskAssessment,
    ) -> Result<Execution, ExecError> {
        if assessment.gated {
            let request = ApprovalRequest {
                request_id: format!("approval-{}", plan.plan_id),
                plan_id: plan.plan_id.clone(),
                signature: plan.signature.clone(),
                assessment: assessment.clone(),
                status: ApprovalStatus::Pending,
                requested_tick: clock.tick,
                decided_tick: None,
                decider: None,
            };
            journal.append(NewEntry::new(clock.cycle, clock.tick, EntryKind::ApprovalRequest, to_value(&request)))?;
            self.approvals.insert(request.request_id.clone(), request.clone());
            self.gated_plans.insert(request.request_id.clone(), PendingPlan { plan: plan.clone(), cycle: clock.cycle });
            return Ok(Execution::Pending(request));
        }
        let result = self.run_steps(journal, actuator, clock, plan, None)?;
        if result.final_status == FinalStatus::Completed {
            self.guard.mark_remediated(&plan.signature, clock.cycle);
        }
        Ok(Execution::Done(result))
    }

    /// Applies a human decision to a pending request.
    pub fn resolve_approval(
        &mut self,
        journal: &mut Journal,
        actuator: &mut dyn Actuator,
        clock: Clock,
        request_id: &str,
        decision: Decision,
        decider: &str,
    ) -> Result<ExecutionResult, ExecError> {
        if decider.trim().is_empty() {
            return Err(ExecError::EmptyDecider);
        }
        let request = self.approvals.get(request_id).ok_or_else(|| ExecError::NotFound(request_id.into()))?;
        if request.status.is_terminal() {
            return Err(ExecError::Terminal { id: request_id.into(), status: request.status.as_str() });
        }
        if clock.tick.saturating_sub(request.requested_tick) >= self.config.approval_ttl {
            self.expire(journal, clock, request_id)?;
            return Err(ExecError::Terminal { id: request_id.into(), status: ApprovalStatus::Expired.as_str() });
        }
        let status = match decision {
            Decision::Approved => ApprovalStatus::Approved,
            Decision::Rejected => ApprovalStatus::Rejected,
        };
        self.decide(journal, clock, request_id, status, decider)?;
        let pending = self.gated_plans.remove(request_id).expect("pending request keeps its plan");
        let result = match decision {
            Decision::Approved => {
                let r = self.run_steps(journal, actuator, clock, &pending.plan, Some(request_id))?;
                if r.final_status == FinalStatus::Completed {
                    self.guard.mark_remediated(&pending.plan.signature, pending.cycle);
                }
                r
            }
            Decision::Rejected => {
                let r = ExecutionResult::untouched(&pending.plan.plan_id, FinalStatus::Rejected);
                self.journal_result(journal, clock, &r)?;
                r
            }
        };
        Ok(result)
    }

    /// Expires every pending request aged at least the TTL. Returns how many.
    pub fn expire_approvals(&mut self, journal: &mut Journal, clock: Clock) -> Result<usize, ExecError> {
        let ttl = self.config.approval_ttl;
        let due: Vec<String> = self
            .approvals
            .values()
            .filter(|a| a.status == ApprovalStatus::Pending && clock.tick.saturating_sub(a.requested_tick) >= ttl)
            .map(|a| a.request_id.clone())
            .collect();
        for id in &due {
            self.expire(journal, clock, id)?;
        }
        Ok(due.len())
    }

    fn expire(&mut self, journal: &mut Journal, clock: Clock, request_id: &str) -> Result<(), ExecError> {
        self.decide(journal, clock, request_id, ApprovalStatus::Expired, "system:ttl")?;
        if let Some(p) = self.gated_plans.remove(request_id) {
            self.journal_result(journal, clock, &ExecutionResult::untouched(&p.plan.plan_id, FinalStatus::Expired))?;
        }
        Ok(())
    }

    fn decide(
        &mut self,
        journal: &mut Journal,
        clock: Clock,
        request_id: &str,
        status: ApprovalStatus,
        decider: &str,
    ) -> Result<(), ExecError> {
        let req = self.approvals.get_mut(request_id).expect("caller checked the id");
        journal.append(NewEntry::new(
            clock.cycle,
            clock.tick,
            EntryKind::ApprovalDecision,
            json!({
                "request_id": request_id,
                "plan_id": req.plan_id,
                "decision": status.as_str(),
                "decider": decider,
                "decided_tick": clock.tick,
            }),
        ))?;
        req.status = status;
        req.decided_tick = Some(clock.tick);
        req.decider = Some(decider.to_string());
        Ok(())
    }

    fn journal_result(&self, journal: &mut Journal, clock: Clock, result: &ExecutionResult) -> Result<(), ExecError> {
        let outcome = match result.final_status {
            FinalStatus::Completed => Outcome::Ok,
            FinalStatus::RolledBack | FinalStatus::RollbackFailed | FinalStatus::Aborted => Outcome::Failed,
            FinalStatus::Rejected | FinalStatus::Expired => Outcome::NotApplicable,
        };
        journal
            .append(NewEntry::new(clock.cycle, clock.tick, EntryKind::Feedback, json!({ "execution": result })).with_outcome(outcome))?;
        Ok(())
    }

    fn run_steps(
        &mut self,
        journal: &mut Journal,
        actuator: &mut dyn Actuator,
        clock: Clock,
        plan: &ActionPlan,
        approval: Option<&str>,
    ) -> Result<ExecutionResult, ExecError> {
        if let Some(step) = plan.steps.iter().find(|s| !actuator.has_service(&s.target)) {
            self.escalate(
                journal,
                clock,
                EscalationReason::UnknownTarget,
                Some(plan.signature.clone()),
                Some(plan.plan_id.clone()),
                format!("step {} targets unknown service {}", step.step_id, step.target),
            )?;
            let r = ExecutionResult::untouched(&plan.plan_id, FinalStatus::Aborted);
            self.journal_result(journal, clock, &r)?;
            return Ok(r);
        }

        let snapshots: BTreeMap<ServiceId, ServiceSnapshot> =
            plan.targets().into_iter().filter_map(|s| actuator.snapshot(&s).map(|snap| (s, snap))).collect();

        let mut applied: Vec<&ActionStep> = Vec::new();
        for step in &plan.steps {
            match actuator.actuate(step) {
                Ok(()) => {
                    journal.append(
                        NewEntry::new(
                            clock.cycle,
                            clock.tick,
                            EntryKind::StepApplied,
                            json!({
                                "plan_id": plan.plan_id,
                                "step_id": step.step_id,
                                "action_kind": step.action_kind,
                                "target": step.target,
                                "params": step.params,
                                "risk_class": step.risk_class,
                                "approval": approval,
                            }),
                        )
                        .with_outcome(Outcome::Ok),
                    )?;
                    applied.push(step);
                }
                Err(err) => {
                    journal.append(
                        NewEntry::new(
                            clock.cycle,
                            clock.tick,
                            EntryKind::StepFailed,
                            json!({
                                "plan_id": plan.plan_id,
                                "step_id": step.step_id,
                                "action_kind": step.action_kind,
                                "target": step.target,
                                "error": err.0,
                            }),
                        )
                        .with_outcome(Outcome::Failed),
                    )?;
                    let restored = self.rollback(journal, actuator, clock, plan, &step.step_id, &applied, &snapshots)?;
                    let r = ExecutionResult {
                        plan_id: plan.plan_id.clone(),
                        applied_steps: applied.iter().map(|s| s.step_id.clone()).collect(),
                        failed_step: Some(step.step_id.clone()),
                        rolled_back: restored,
                        final_status: if restored { FinalStatus::RolledBack } else { FinalStatus::RollbackFailed },
                    };
                    self.journal_result(journal, clock, &r)?;
                    return Ok(r);
                }
            }
        }
        let r = ExecutionResult {
            plan_id: plan.plan_id.clone(),
            applied_steps: applied.iter().map(|s| s.step_id.clone()).collect(),
            failed_step: None,
            rolled_back: false,
            final_status: FinalStatus::Completed,
        };
        self.journal_result(journal, clock, &r)?;
        Ok(r)
    }

    /// Reverts `applied` in reverse order. Returns false on an inverse failure,
    /// after journaling the escalation and freezing the affected services.
    #[allow(clippy::too_many_arguments)]
    fn rollback(
        &mut self,
        journal: &mut Journal,
        actuator: &mut dyn Actuator,
        clock: Clock,
        plan: &ActionPlan,
        failed_step: &str,
        applied: &[&ActionStep],
        snapshots: &BTreeMap<ServiceId, ServiceSnapshot>,
    ) -> Result<bool, ExecError> {
        let mut reverted = Vec::new();
        let mut failure = None;
        for step in applied.iter().rev() {
            let Some(inverse) = &step.inverse else {
                reverted.push(json!({"step_id": step.step_id, "result": "noop"}));
                continue;
            };
            let snapshot = snapshots.get(&step.target).cloned().unwrap_or_default();
            match actuator.revert(step, inverse, &snapshot) {
                Ok(()) => reverted.push(json!({"step_id": step.step_id, "inverse": inverse, "result": "restored"})),
                Err(err) => {
                    reverted.push(json!({"step_id": step.step_id, "inverse": inverse, "result": "failed", "error": err.0}));
                    failure = Some((step.step_id.clone(), err));
                    break;
                }
            }
        }
        let status = if failure.is_some() { "rollback_failed" } else { "rolled_back" };
        journal.append(
            NewEntry::new(
                clock.cycle,
                clock.tick,
                EntryKind::Rollback,
                json!({"plan_id": plan.plan_id, "failed_step": failed_step, "reverted": reverted, "status": status}),
            )
            .with_outcome(if failure.is_some() { Outcome::Failed } else { Outcome::Ok }),
        )?;
        let Some((step_id, err)) = failure else {
            return Ok(true);
        };
        let id = self.escalate(
            journal,
            clock,
            EscalationReason::RollbackFailed,
            Some(plan.signature.clone()),
            Some(plan.plan_id.clone()),
            format!("inverse of {step_id} failed: {err}"),
        )?;
        for target in plan.targets() {
            self.frozen_services.insert(target, id.clone());
        }
        Ok(false)
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("executor records serialize")
}
