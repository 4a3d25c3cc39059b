//! The knowledge base: an append-only journal of every loop decision.
//!
//! Each record is one JSON document per line with `seq` as the first field.
//! The in-memory [`KbState`] is a fold over the records, so replaying a
//! journal file reproduces the live state and its digest exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::types::{Signature, Tick};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    TelemetrySummary,
    Anomaly,
    Plan,
    Assessment,
    ApprovalRequest,
    ApprovalDecision,
    StepApplied,
    StepFailed,
    Rollback,
    Escalation,
    Feedback,
}

impl EntryKind {
    pub const ALL: [EntryKind; 11] = [
        EntryKind::TelemetrySummary,
        EntryKind::Anomaly,
        EntryKind::Plan,
        EntryKind::Assessment,
        EntryKind::ApprovalRequest,
        EntryKind::ApprovalDecision,
        EntryKind::StepApplied,
        EntryKind::StepFailed,
        EntryKind::Rollback,
        EntryKind::Escalation,
        EntryKind::Feedback,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::TelemetrySummary => "telemetry_summary",
            EntryKind::Anomaly => "anomaly",
            EntryKind::Plan => "plan",
            EntryKind::Assessment => "assessment",
            EntryKind::ApprovalRequest => "approval_request",
            EntryKind::ApprovalDecision => "approval_decision",
            EntryKind::StepApplied => "step_applied",
            EntryKind::StepFailed => "step_failed",
            EntryKind::Rollback => "rollback",
            EntryKind::Escalation => "escalation",
            EntryKind::Feedback => "feedback",
        }
    }
}

impl FromStr for EntryKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntryKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown entry kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    #[serde(rename = "ok")]
    Ok,
    #[serde(rename = "failed")]
    Failed,
    #[serde(rename = "n/a")]
    NotApplicable,
}

/// One immutable journal record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub cycle: u64,
    pub tick: Tick,
    pub kind: EntryKind,
    pub payload: Value,
    pub outcome: Outcome,
}

/// A record before it has been assigned a sequence number.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEntry {
    pub cycle: u64,
    pub tick: Tick,
    pub kind: EntryKind,
    pub payload: Value,
    pub outcome: Outcome,
}

impl NewEntry {
    pub fn new(cycle: u64, tick: Tick, kind: EntryKind, payload: Value) -> Self {
        NewEntry { cycle, tick, kind, payload, outcome: Outcome::NotApplicable }
    }

    pub fn with_outcome(mut self, outcome: Outcome) -> Self {
        self.outcome = outcome;
        self
    }
}

#[derive(Debug, Error)]
pub enum KbError {
    #[error("cannot open journal {path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error("journal write failed: {0}")]
    Write(#[source] io::Error),
    #[error("journal halted after an earlier write failure")]
    Halted,
    #[error("corrupt journal at line {line}: {reason} (last valid seq: {})", fmt_seq(.last_valid_seq))]
    Corrupt { line: usize, last_valid_seq: Option<u64>, reason: String },
    #[error("unsupported digest algorithm `{0}`")]
    UnsupportedDigest(String),
}

fn fmt_seq(seq: &Option<u64>) -> String {
    seq.map_or_else(|| "none".to_string(), |s| s.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigestAlgorithm {
    #[default]
    Sha256,
}

impl FromStr for DigestAlgorithm {
    type Err = KbError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sha256" => Ok(DigestAlgorithm::Sha256),
            other => Err(KbError::UnsupportedDigest(other.to_string())),
        }
    }
}

/// Serializes a value with object keys sorted.
///
/// `serde_json::Value` objects are ordered maps, so routing through `Value`
/// canonicalizes any serializable input.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("journal values serialize");
    serde_json::to_string(&v).expect("json values serialize")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalView {
    pub plan_id: String,
    pub status: String,
    pub requested_tick: Tick,
    pub decided_tick: Option<Tick>,
    pub decider: Option<String>,
}

/// State reconstructed by folding journal entries in order.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct KbState {
    pub entry_count: u64,
    pub last_seq: Option<u64>,
    pub last_cycle: Option<u64>,
    pub last_tick: Option<Tick>,
    pub counts: BTreeMap<EntryKind, u64>,
    pub anomalies: BTreeMap<String, Value>,
    pub plans: BTreeMap<String, Value>,
    pub approvals: BTreeMap<String, ApprovalView>,
    pub escalations: BTreeMap<String, Value>,
    pub acknowledged: BTreeSet<String>,
    /// Rolling hash over every canonical record.
    pub chain: String,
}

fn str_field<'a>(payload: &'a Value, key: &str) -> Option<&'a str> {
    payload.get(key).and_then(Value::as_str)
}

impl KbState {
    pub fn apply(&mut self, entry: &JournalEntry) {
        self.entry_count += 1;
        self.last_seq = Some(entry.seq);
        self.last_cycle = Some(entry.cycle);
        self.last_tick = Some(entry.tick);
        *self.counts.entry(entry.kind).or_default() += 1;

        let p = &entry.payload;
        match entry.kind {
            EntryKind::Anomaly => {
                if let Some(id) = str_field(p, "id") {
                    self.anomalies.insert(id.to_string(), p.clone());
                }
            }
            EntryKind::Plan => {
                if let Some(id) = str_field(p, "plan_id") {
                    self.plans.insert(id.to_string(), p.clone());
                }
            }
            EntryKind::ApprovalRequest => {
                if let Some(id) = str_field(p, "request_id") {
                    self.approvals.insert(
                        id.to_string(),
                        ApprovalView {
                            plan_id: str_field(p, "plan_id").unwrap_or_default().to_string(),
                            status: "pending".to_string(),
                            requested_tick: p.get("requested_tick").and_then(Value::as_u64).unwrap_or(entry.tick),
                            decided_tick: None,
                            decider: None,
                        },
                    );
                }
            }
            EntryKind::ApprovalDecision => {
                if let Some(view) = str_field(p, "request_id").and_then(|id| self.approvals.get_mut(id)) {
                    view.status = str_field(p, "decision").unwrap_or("unknown").to_string();
                    view.decided_tick = p.get("decided_tick").and_then(Value::as_u64).or(Some(entry.tick));
                    view.decider = str_field(p, "decider").map(str::to_string);
                }
            }
            EntryKind::Escalation => {
                if let Some(id) = str_field(p, "escalation_id") {
                    self.escalations.insert(id.to_string(), p.clone());
                }
            }
            EntryKind::Feedback => {
                if let Some(id) = str_field(p, "acknowledged") {
                    self.acknowledged.insert(id.to_string());
                }
            }
            _ => {}
        }

        let mut hasher = Sha256::new();
        hasher.update(self.chain.as_bytes());
        hasher.update(canonical_json(entry).as_bytes());
        self.chain = hex::encode(hasher.finalize());
    }

    /// Digest of the canonical serialization of the whole state.
    pub fn digest(&self) -> String {
        self.digest_with(DigestAlgorithm::Sha256)
    }

    pub fn digest_with(&self, algorithm: DigestAlgorithm) -> String {
        match algorithm {
            DigestAlgorithm::Sha256 => hex::encode(Sha256::digest(canonical_json(self).as_bytes())),
        }
    }
}

/// Selection criteria for [`query`]. Unset fields match everything.
#[derive(Debug, Clone, Default)]
pub struct QueryFilter {
    pub kind: Option<EntryKind>,
    pub cycles: Option<RangeInclusive<u64>>,
    pub signature: Option<Signature>,
}

impl QueryFilter {
    pub fn kind(kind: EntryKind) -> Self {
        QueryFilter { kind: Some(kind), ..Default::default() }
    }

    pub fn matches(&self, entry: &JournalEntry) -> bool {
        if self.kind.is_some_and(|k| k != entry.kind) {
            return false;
        }
        if self.cycles.as_ref().is_some_and(|r| !r.contains(&entry.cycle)) {
            return false;
        }
        if let Some(sig) = &self.signature {
            let wanted = serde_json::to_value(sig).expect("signature serializes");
            if entry.payload.get("signature") != Some(&wanted) {
                return false;
            }
        }
        true
    }
}

pub fn query(entries: &[JournalEntry], filter: &QueryFilter) -> Vec<JournalEntry> {
    entries.iter().filter(|e| filter.matches(e)).cloned().collect()
}

/// Read-only view of the journal. Readers always see a consistent prefix.
#[derive(Debug, Clone, Default)]
pub struct JournalReader {
    entries: Arc<RwLock<Vec<JournalEntry>>>,
}

impl JournalReader {
    /// A detached reader over already-loaded entries.
    pub fn from_entries(entries: Vec<JournalEntry>) -> Self {
        JournalReader { entries: Arc::new(RwLock::new(entries)) }
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn query(&self, filter: &QueryFilter) -> Vec<JournalEntry> {
        query(&self.entries.read(), filter)
    }

    pub fn page(&self, from_seq: u64, limit: usize) -> Vec<JournalEntry> {
        let entries = self.entries.read();
        entries.iter().skip_while(|e| e.seq < from_seq).take(limit).cloned().collect()
    }

    pub fn all(&self) -> Vec<JournalEntry> {
        self.entries.read().clone()
    }
}

/// Options controlling journal durability and digests.
#[derive(Debug, Clone, Copy)]
pub struct JournalOptions {
    pub fsync: bool,
    pub digest: DigestAlgorithm,
}

impl Default for JournalOptions {
    fn default() -> Self {
        JournalOptions { fsync: true, digest: DigestAlgorithm::Sha256 }
    }
}

/// The single-writer journal.
#[derive(Debug)]
pub struct Journal {
    file: Option<File>,
    path: Option<PathBuf>,
    reader: JournalReader,
    state: KbState,
    options: JournalOptions,
    halted: bool,
}

impl Journal {
    /// A journal that lives only in memory.
    pub fn in_memory() -> Self {
        Journal {
            file: None,
            path: None,
            reader: JournalReader::default(),
            state: KbState::default(),
            options: JournalOptions::default(),
            halted: false,
        }
    }

    /// Opens (or creates) a journal file, replaying any existing records.
    pub fn open(path: impl AsRef<Path>, options: JournalOptions) -> Result<Self, KbError> {
        let path = path.as_ref().to_path_buf();
        let (entries, state) = if path.is_file() {
            let replayed = replay(&path)?;
            (replayed.entries, replayed.state)
        } else {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(|source| KbError::Open { path: path.clone(), source })?;
            }
            (Vec::new(), KbState::default())
        };
        let file =
            OpenOptions::new().create(true).append(true).open(&path).map_err(|source| KbError::Open { path: path.clone(), source })?;
        Ok(Journal {
            file: Some(file),
            path: Some(path),
            reader: JournalReader { entries: Arc::new(RwLock::new(entries)) },
            state,
            options,
            halted: false,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn reader(&self) -> JournalReader {
        self.reader.clone()
    }

    pub fn state(&self) -> &KbState {
        &self.state
    }

    pub fn digest(&self) -> String {
        self.state.digest_with(self.options.digest)
    }

    pub fn next_seq(&self) -> u64 {
        self.state.last_seq.map_or(0, |s| s + 1)
    }

    pub fn is_halted(&self) -> bool {
        self.halted
    }

    /// Persists a record and returns its sequence number.
    ///
    /// The record is on disk (and synced, if configured) before this returns.
    /// Any write failure halts the journal for good.
    pub fn append(&mut self, entry: NewEntry) -> Result<u64, KbError> {
        if self.halted {
            return Err(KbError::Halted);
        }
        let record = JournalEntry {
            seq: self.next_seq(),
            cycle: entry.cycle,
            tick: entry.tick,
            kind: entry.kind,
            payload: entry.payload,
            outcome: entry.outcome,
        };
        if let Some(file) = self.file.as_mut() {
            let mut line = serde_json::to_string(&record).expect("journal entries serialize");
            line.push('\n');
            let written = file.write_all(line.as_bytes()).and_then(|_| file.flush()).and_then(|_| {
                if self.options.fsync {
                    file.sync_data()
                } else {
                    Ok(())
                }
            });
            if let Err(err) = written {
                self.halted = true;
                log::error!("journal write failed, halting: {err}");
                return Err(KbError::Write(err));
            }
        }
        self.state.apply(&record);
        let seq = record.seq;
        self.reader.entries.write().push(record);
        Ok(seq)
    }

    pub fn query(&self, filter: &QueryFilter) -> Vec<JournalEntry> {
        self.reader.query(filter)
    }
}

/// Result of replaying a journal file.
#[derive(Debug, Clone)]
pub struct Replayed {
    pub entries: Vec<JournalEntry>,
    pub state: KbState,
}

/// Rebuilds the knowledge-base state from a journal file.
///
/// Stops at the first malformed record; nothing after it is trusted.
pub fn replay(path: impl AsRef<Path>) -> Result<Replayed, KbError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| KbError::Open { path: path.to_path_buf(), source })?;
    let mut entries = Vec::new();
    let mut state = KbState::default();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let last_valid_seq = state.last_seq;
        let corrupt = |reason: String| KbError::Corrupt { line: idx + 1, last_valid_seq, reason };
        let line = line.map_err(|e| corrupt(e.to_string()))?;
        let entry: JournalEntry = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        let expected = last_valid_seq.map_or(0, |s| s + 1);
        if entry.seq != expected {
            return Err(corrupt(format!("expected seq {expected}, found {}", entry.seq)));
        }
        state.apply(&entry);
        entries.push(entry);
    }
    Ok(Replayed { entries, state })
}

/// Scans for records that reference something not journaled before them.
pub fn audit_references(entries: &[JournalEntry]) -> Vec<String> {
    let mut anomalies = BTreeSet::new();
    let mut plans = BTreeSet::new();
    let mut violations = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        if e.seq != i as u64 {
            violations.push(format!("seq gap: position {i} holds seq {}", e.seq));
        }
        match e.kind {
            EntryKind::Anomaly => {
                if let Some(id) = str_field(&e.payload, "id") {
                    anomalies.insert(id.to_string());
                }
            }
            EntryKind::Plan => {
                if let Some(refs) = e.payload.get("anomaly_refs").and_then(Value::as_array) {
                    for r in refs.iter().filter_map(Value::as_str) {
                        if !anomalies.contains(r) {
                            violations.push(format!("seq {}: plan references unknown anomaly {r}", e.seq));
                        }
                    }
                }
                if let Some(id) = str_field(&e.payload, "plan_id") {
                    plans.insert(id.to_string());
                }
            }
            EntryKind::StepApplied | EntryKind::StepFailed | EntryKind::Rollback | EntryKind::Assessment => {
                match str_field(&e.payload, "plan_id") {
                    Some(id) if plans.contains(id) => {}
                    Some(id) => violations.push(format!("seq {}: {} references unknown plan {id}", e.seq, e.kind.as_str())),
                    None => violations.push(format!("seq {}: {} without plan_id", e.seq, e.kind.as_str())),
                }
            }
            _ => {}
        }
    }
    violations
}
