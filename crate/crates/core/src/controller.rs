//! The MAPE-K cycle: sense, monitor, analyze, plan, gate/execute, feedback.
//!
//! One cycle runs per simulator tick. The gateway talks to a running
//! controller through a command queue (consumed at cycle boundaries) and a
//! published [`Snapshot`]; it never touches controller state directly.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::oneshot;

use crate::config::{Config, ConfigError};
use crate::detectors::{Analyzer, AnomalyReport};
use crate::executor::{
    ApprovalRequest, ApprovalStatus, Clock, Decision, Escalation, EscalationReason, ExecError, Execution, ExecutionResult, Executor,
    FinalStatus, GuardVerdict,
};
use crate::knowledge::{EntryKind, Journal, JournalEntry, JournalReader, KbError, NewEntry};
use crate::planner::{assess, Formulation, PolicyAgent, RuleAgent};
use crate::simenv::{Scenario, ServiceState, SimEnv, SimError};
use crate::telemetry::{Monitor, Window};
use crate::types::{ServiceId, Signature, Tick};

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Scenario(#[from] SimError),
    #[error("journal {path} already holds {entries} entries; runs start from an empty journal")]
    JournalNotEmpty { path: String, entries: usize },
    #[error("knowledge base failure, loop halted: {0}")]
    Halted(#[from] KbError),
}

impl From<ExecError> for ControllerError {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::Journal(kb) => ControllerError::Halted(kb),
            other => unreachable!("executor bookkeeping error inside the cycle: {other}"),
        }
    }
}

/// Why a command from the gateway was refused.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
#[serde(tag = "error", content = "message", rename_all = "snake_case")]
pub enum CommandError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Halted(String),
}

impl From<ExecError> for CommandError {
    fn from(e: ExecError) -> Self {
        let msg = e.to_string();
        match e {
            ExecError::NotFound(_) | ExecError::UnknownEscalation(_) => CommandError::NotFound(msg),
            ExecError::Terminal { .. } | ExecError::AlreadyAcknowledged(_) => CommandError::Conflict(msg),
            ExecError::EmptyDecider => CommandError::BadRequest(msg),
            ExecError::Journal(_) => CommandError::Halted(msg),
        }
    }
}

/// Operator input queued for the next cycle boundary.
#[derive(Debug)]
pub enum Command {
    Resolve { request_id: String, decision: Decision, decider: String, reply: oneshot::Sender<Result<ExecutionResult, CommandError>> },
    Acknowledge { escalation_id: String, by: String, reply: oneshot::Sender<Result<(), CommandError>> },
}

/// Read model published for the gateway after every cycle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tick: Tick,
    /// Cycles completed so far.
    pub cycles: u64,
    pub halted: bool,
    pub live: bool,
    pub services: Vec<ServiceState>,
    pub approvals: Vec<ApprovalRequest>,
    pub escalations: Vec<Escalation>,
    pub frozen_services: Vec<ServiceId>,
    pub digest: String,
    pub journal_entries: u64,
}

impl Snapshot {
    /// Rebuilds approvals and escalations from a journal, for read-only serving.
    pub fn from_journal(entries: &[JournalEntry], digest: String) -> Self {
        let mut approvals: BTreeMap<String, ApprovalRequest> = BTreeMap::new();
        let mut escalations: BTreeMap<String, Escalation> = BTreeMap::new();
        for e in entries {
            match e.kind {
                EntryKind::ApprovalRequest => {
                    if let Ok(r) = serde_json::from_value::<ApprovalRequest>(e.payload.clone()) {
                        approvals.insert(r.request_id.clone(), r);
                    }
                }
                EntryKind::ApprovalDecision => {
                    let id = e.payload.get("request_id").and_then(Value::as_str).unwrap_or_default();
                    if let Some(r) = approvals.get_mut(id) {
                        r.status = serde_json::from_value(e.payload["decision"].clone()).unwrap_or(r.status);
                        r.decided_tick = e.payload.get("decided_tick").and_then(Value::as_u64);
                        r.decider = e.payload.get("decider").and_then(Value::as_str).map(str::to_string);
                    }
                }
                EntryKind::Escalation => {
                    if let Ok(esc) = serde_json::from_value::<Escalation>(e.payload.clone()) {
                        escalations.insert(esc.escalation_id.clone(), esc);
                    }
                }
                EntryKind::Feedback => {
                    if let Some(esc) = e.payload.get("acknowledged").and_then(Value::as_str).and_then(|id| escalations.get_mut(id)) {
                        esc.acknowledged = true;
                    }
                }
                _ => {}
            }
        }
        let last = entries.last();
        Snapshot {
            tick: last.map_or(0, |e| e.tick),
            cycles: last.map_or(0, |e| e.cycle + 1),
            halted: false,
            live: false,
            services: vec![],
            approvals: approvals.into_values().collect(),
            escalations: escalations.into_values().collect(),
            frozen_services: vec![],
            digest,
            journal_entries: entries.len() as u64,
        }
    }
}

/// Per-cycle feedback, journaled as the last entry of every cycle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: u64,
    pub tick: Tick,
    pub samples: usize,
    pub window: Option<Window>,
    pub anomalies: usize,
    pub plans: usize,
    pub executions: BTreeMap<String, u64>,
    pub approvals_requested: usize,
    pub approvals_expired: usize,
    pub decisions: usize,
    pub escalations: usize,
    pub skipped: usize,
}

/// Totals over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub cycles: u64,
    pub anomalies: u64,
    pub plans: u64,
    pub executions: BTreeMap<String, u64>,
    pub approvals_requested: u64,
    pub escalations: u64,
    pub journal_entries: u64,
    pub digest: String,
}

impl RunSummary {
    fn absorb(&mut self, r: &CycleRecord) {
        self.cycles += 1;
        self.anomalies += r.anomalies as u64;
        self.plans += r.plans as u64;
        for (k, v) in &r.executions {
            *self.executions.entry(k.clone()).or_default() += v;
        }
        self.approvals_requested += r.approvals_requested as u64;
        self.escalations += r.escalations as u64;
    }
}

/// Cloneable access for the gateway.
#[derive(Clone)]
pub struct ControllerHandle {
    pub commands: Sender<Command>,
    pub snapshot: Arc<RwLock<Snapshot>>,
    pub journal: JournalReader,
}

fn status_key(s: FinalStatus) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

pub struct Controller {
    config: Config,
    journal: Journal,
    monitor: Monitor,
    analyzer: Analyzer,
    agent: Box<dyn PolicyAgent>,
    executor: Executor,
    sim: SimEnv,
    commands_rx: Receiver<Command>,
    commands_tx: Sender<Command>,
    snapshot: Arc<RwLock<Snapshot>>,
    halted: bool,
    summary: RunSummary,
    pending_record: CycleRecord,
}

impl Controller {
    /// Builds a controller with the deterministic rule agent.
    pub fn new(config: Config, scenario: &Scenario, seed: u64) -> Result<Self, ControllerError> {
        let agent = Box::new(RuleAgent::new(config.plan.clone()));
        Self::with_agent(config, scenario, seed, agent)
    }

    pub fn with_agent(config: Config, scenario: &Scenario, seed: u64, agent: Box<dyn PolicyAgent>) -> Result<Self, ControllerError> {
        config.validate()?;
        let sim = SimEnv::new(scenario, config.sim.clone(), seed)?;
        let journal = match &config.kb.journal_path {
            Some(path) => {
                let j = Journal::open(path, config.kb.options()?)?;
                if j.next_seq() > 0 {
                    return Err(ControllerError::JournalNotEmpty { path: path.display().to_string(), entries: j.next_seq() as usize });
                }
                j
            }
            None => Journal::in_memory(),
        };
        let (commands_tx, commands_rx) = mpsc::channel();
        let c = Controller {
            monitor: Monitor::new(config.monitor.clone(), Some(sim.service_ids())),
            analyzer: Analyzer::new(config.analyze.clone()),
            executor: Executor::new(config.execute.clone()),
            agent,
            sim,
            journal,
            commands_rx,
            commands_tx,
            snapshot: Arc::new(RwLock::new(Snapshot::default())),
            halted: false,
            summary: RunSummary::default(),
            pending_record: CycleRecord::default(),
            config,
        };
        c.publish();
        Ok(c)
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn sim(&self) -> &SimEnv {
        &self.sim
    }

    /// Direct simulator access, for scripted fault injection in tests and demos.
    pub fn sim_mut(&mut self) -> &mut SimEnv {
        &mut self.sim
    }

    pub fn executor(&self) -> &Executor {
        &self.executor
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    pub fn summary(&self) -> RunSummary {
        RunSummary {
            journal_entries: self.journal.next_seq(),
            digest: self.journal.digest(),
            escalations: self.executor.escalations().count() as u64,
            ..self.summary.clone()
        }
    }

    pub fn handle(&self) -> ControllerHandle {
        ControllerHandle { commands: self.commands_tx.clone(), snapshot: self.snapshot.clone(), journal: self.journal.reader() }
    }

    fn clock(&self) -> Clock {
        let t = self.sim.now();
        Clock { cycle: t, tick: t }
    }

    fn publish(&self) {
        let snap = Snapshot {
            tick: self.sim.now(),
            cycles: self.summary.cycles,
            halted: self.halted,
            live: true,
            services: self.sim.states().cloned().collect(),
            approvals: self.executor.approvals().cloned().collect(),
            escalations: self.executor.escalations().cloned().collect(),
            frozen_services: self.executor.frozen_services().into_iter().collect(),
            digest: self.journal.digest(),
            journal_entries: self.journal.next_seq(),
        };
        *self.snapshot.write() = snap;
    }

    fn halt(&mut self, err: KbError) -> ControllerError {
        log::error!("halting control loop: {err}");
        self.halted = true;
        self.publish();
        ControllerError::Halted(err)
    }

    /// Approves or rejects a pending request right now (outside the queue).
    pub fn resolve_approval(&mut self, request_id: &str, decision: Decision, decider: &str) -> Result<ExecutionResult, CommandError> {
        if self.halted {
            return Err(CommandError::Halted("control loop halted".into()));
        }
        let clock = self.clock();
        let result = self.executor.resolve_approval(&mut self.journal, &mut self.sim, clock, request_id, decision, decider);
        match &result {
            Ok(r) => {
                self.pending_record.decisions += 1;
                *self.pending_record.executions.entry(status_key(r.final_status)).or_default() += 1;
                if r.final_status == FinalStatus::Completed {
                    if let Some(req) = self.executor.approval(request_id) {
                        let services: Vec<ServiceId> = req.signature.target.services().into_iter().cloned().collect();
                        for s in services {
                            self.analyzer.reset_service(&s);
                        }
                    }
                }
            }
            Err(ExecError::Terminal { status, .. }) if *status == ApprovalStatus::Expired.as_str() => {
                self.pending_record.approvals_expired += 1;
            }
            Err(_) => {}
        }
        if self.journal.is_halted() {
            self.halted = true;
        }
        result.map_err(CommandError::from)
    }

    pub fn acknowledge(&mut self, escalation_id: &str, by: &str) -> Result<(), CommandError> {
        if self.halted {
            return Err(CommandError::Halted("control loop halted".into()));
        }
        let clock = self.clock();
        let r = self.executor.acknowledge(&mut self.journal, clock, escalation_id, by);
        if self.journal.is_halted() {
            self.halted = true;
        }
        r.map_err(CommandError::from)
    }

    fn apply_command(&mut self, cmd: Command) -> Box<dyn FnOnce()> {
        match cmd {
            Command::Resolve { request_id, decision, decider, reply } => {
                let r = self.resolve_approval(&request_id, decision, &decider);
                Box::new(move || {
                    let _ = reply.send(r);
                })
            }
            Command::Acknowledge { escalation_id, by, reply } => {
                let r = self.acknowledge(&escalation_id, &by);
                Box::new(move || {
                    let _ = reply.send(r);
                })
            }
        }
    }

    /// Consumes every queued command. Replies go out after the new snapshot
    /// is published, so a client sees its own decision on the next read.
    pub fn process_commands(&mut self) -> usize {
        let mut replies = Vec::new();
        while let Ok(cmd) = self.commands_rx.try_recv() {
            replies.push(self.apply_command(cmd));
        }
        let n = replies.len();
        if n > 0 {
            self.publish();
        }
        for send in replies {
            send();
        }
        n
    }

    /// Blocks up to `timeout` for commands while no cycles are running.
    pub fn wait_for_commands(&mut self, timeout: Duration) -> usize {
        let first = match self.commands_rx.recv_timeout(timeout) {
            Ok(cmd) => cmd,
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => return 0,
        };
        let mut replies = vec![self.apply_command(first)];
        while let Ok(cmd) = self.commands_rx.try_recv() {
            replies.push(self.apply_command(cmd));
        }
        self.publish();
        let n = replies.len();
        for send in replies {
            send();
        }
        n
    }

    /// Runs `ticks` cycles.
    pub fn run(&mut self, ticks: u64) -> Result<RunSummary, ControllerError> {
        self.run_paced(ticks, Duration::ZERO)
    }

    /// Runs `ticks` cycles, sleeping `pause` between them.
    pub fn run_paced(&mut self, ticks: u64, pause: Duration) -> Result<RunSummary, ControllerError> {
        for i in 0..ticks {
            self.run_cycle()?;
            if !pause.is_zero() && i + 1 < ticks {
                std::thread::sleep(pause);
            }
        }
        Ok(self.summary())
    }

    /// One full MAPE-K cycle at the current tick.
    pub fn run_cycle(&mut self) -> Result<CycleRecord, ControllerError> {
        if self.halted {
            return Err(ControllerError::Halted(KbError::Halted));
        }
        match self.cycle_inner() {
            Ok(r) => Ok(r),
            Err(ControllerError::Halted(e)) => Err(self.halt(e)),
            Err(e) => Err(e),
        }
    }

    fn cycle_inner(&mut self) -> Result<CycleRecord, ControllerError> {
        let clock = self.clock();
        let mut record = std::mem::take(&mut self.pending_record);
        record.cycle = clock.cycle;
        record.tick = clock.tick;

        record.approvals_expired += self.executor.expire_approvals(&mut self.journal, clock)?;
        self.process_commands();
        if self.journal.is_halted() {
            return Err(ControllerError::Halted(KbError::Halted));
        }
        record.decisions += std::mem::take(&mut self.pending_record.decisions);
        for (k, v) in std::mem::take(&mut self.pending_record.executions) {
            *record.executions.entry(k).or_default() += v;
        }
        record.approvals_expired += std::mem::take(&mut self.pending_record.approvals_expired);

        record.samples = self.monitor.ingest(self.sim.sense());

        if let Some(window) = self.monitor.window_closing_at(clock.tick) {
            record.window = Some(window);
            let closed = self.monitor.close_window(window);
            self.journal.append(NewEntry::new(
                clock.cycle,
                clock.tick,
                EntryKind::TelemetrySummary,
                closed.summary(self.monitor.drops()),
            ))?;
            let found = self.analyzer.analyze(&closed, &self.config.goals);
            let anomalies = self.prioritize(found);
            for anomaly in anomalies {
                self.handle_anomaly(clock, &anomaly, &mut record)?;
            }
        }

        self.journal.append(NewEntry::new(clock.cycle, clock.tick, EntryKind::Feedback, json!({ "cycle_record": record })))?;
        self.summary.absorb(&record);
        self.sim.tick();
        self.publish();
        Ok(record)
    }

    /// One anomaly per signature, most important goal metric first.
    fn prioritize(&self, mut anomalies: Vec<AnomalyReport>) -> Vec<AnomalyReport> {
        let goals = &self.config.goals;
        anomalies.sort_by(|a, b| {
            a.signature
                .cmp(&b.signature)
                .then(goals.priority_rank(a.metric).cmp(&goals.priority_rank(b.metric)))
                .then_with(|| a.id.cmp(&b.id))
        });
        anomalies.dedup_by(|later, first| later.signature == first.signature);
        anomalies
            .sort_by(|a, b| goals.priority_rank(a.metric).cmp(&goals.priority_rank(b.metric)).then_with(|| a.signature.cmp(&b.signature)));
        anomalies
    }

    fn has_open_escalation(&self, signature: &Signature, reason: EscalationReason) -> bool {
        self.executor.escalations().any(|e| !e.acknowledged && e.reason == reason && e.signature.as_ref() == Some(signature))
    }

    fn handle_anomaly(&mut self, clock: Clock, anomaly: &AnomalyReport, record: &mut CycleRecord) -> Result<(), ControllerError> {
        let mut payload = serde_json::to_value(anomaly).expect("anomaly serializes");
        payload["cycle"] = json!(clock.cycle);
        self.journal.append(NewEntry::new(clock.cycle, clock.tick, EntryKind::Anomaly, payload))?;
        record.anomalies += 1;

        let sig = &anomaly.signature;
        let frozen_service = sig.target.services().into_iter().any(|s| self.executor.is_service_frozen(s));
        if self.executor.is_signature_frozen(sig) || frozen_service || self.executor.has_pending_for(sig) {
            log::debug!("skipping {sig}: frozen or awaiting approval");
            record.skipped += 1;
            return Ok(());
        }

        if self.executor.loop_guard(&mut self.journal, clock, sig)? == GuardVerdict::Suppressed {
            log::warn!("loop guard suppressed {sig}");
            record.escalations += 1;
            return Ok(());
        }

        let plans = match self.agent.formulate(anomaly, &self.config.goals, self.journal.state()) {
            Formulation::Plans(plans) => plans,
            Formulation::Escalate(reason) => {
                if !self.has_open_escalation(sig, reason) {
                    self.executor.escalate(
                        &mut self.journal,
                        clock,
                        reason,
                        Some(sig.clone()),
                        None,
                        format!("{} needs a human: {}", anomaly.id, serde_json::to_value(reason).unwrap_or_default()),
                    )?;
                    record.escalations += 1;
                }
                return Ok(());
            }
        };

        let ranked = self.agent.rank(plans);
        for (i, plan) in ranked.iter().enumerate() {
            let mut payload = serde_json::to_value(plan).expect("plan serializes");
            payload["selected"] = json!(i == 0);
            payload["rank"] = json!(i);
            self.journal.append(NewEntry::new(clock.cycle, clock.tick, EntryKind::Plan, payload))?;
            record.plans += 1;
        }
        let top = &ranked[0];
        let assessment = assess(top, self.config.plan.alpha, &self.config.plan.weights);
        self.journal.append(NewEntry::new(
            clock.cycle,
            clock.tick,
            EntryKind::Assessment,
            serde_json::to_value(&assessment).expect("assessment serializes"),
        ))?;

        match self.executor.execute(&mut self.journal, &mut self.sim, clock, top, &assessment)? {
            Execution::Pending(_) => record.approvals_requested += 1,
            Execution::Done(result) => {
                *record.executions.entry(status_key(result.final_status)).or_default() += 1;
                match result.final_status {
                    FinalStatus::Completed => {
                        let targets: BTreeSet<ServiceId> = top.targets();
                        for s in &targets {
                            self.analyzer.reset_service(s);
                        }
                    }
                    FinalStatus::RollbackFailed | FinalStatus::Aborted => record.escalations += 1,
                    _ => {}
                }
            }
        }
        Ok(())
    }
}
