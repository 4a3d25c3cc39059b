#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::Value;

use mapek_core::config::Config;
use mapek_core::controller::Controller;
use mapek_core::knowledge::{EntryKind, JournalEntry};
use mapek_core::simenv::Scenario;

pub const SCENARIOS: [(&str, &str, u64); 4] = [
    ("s1_memory_leak", "s1_config", 120),
    ("s2_cert_expiry", "s2_config", 60),
    ("s3_degradation_loop", "s3_config", 20),
    ("s4_rollback", "s4_config", 30),
];

pub fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.toml"))
}

pub fn load(scenario: &str, config: &str) -> (Config, Scenario) {
    let config = Config::load(scenario_path(config)).expect("config loads");
    let scenario = Scenario::load(scenario_path(scenario)).expect("scenario loads");
    (config, scenario)
}

/// A controller journaling to `journal`, or in memory when `None`.
pub fn controller(scenario: &str, config: &str, journal: Option<&Path>) -> Controller {
    let (mut config, scenario) = load(scenario, config);
    config.kb.journal_path = journal.map(Path::to_path_buf);
    Controller::new(config, &scenario, 0).expect("controller starts")
}

pub fn entries(c: &Controller) -> Vec<JournalEntry> {
    c.journal().reader().all()
}

pub fn of_kind(entries: &[JournalEntry], kind: EntryKind) -> Vec<&JournalEntry> {
    entries.iter().filter(|e| e.kind == kind).collect()
}

pub fn str_at<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or_default()
}

/// Independent audit: every HR step_applied must follow an approved
/// approval_decision for the same plan.
pub fn unapproved_hr_steps(entries: &[JournalEntry]) -> Vec<u64> {
    let mut approved = std::collections::BTreeSet::new();
    let mut bad = Vec::new();
    for e in entries {
        match e.kind {
            EntryKind::ApprovalDecision if str_at(&e.payload, "decision") == "approved" => {
                approved.insert(str_at(&e.payload, "plan_id").to_string());
            }
            EntryKind::StepApplied if str_at(&e.payload, "risk_class") == "HR" && !approved.contains(str_at(&e.payload, "plan_id")) => {
                bad.push(e.seq);
            }
            _ => {}
        }
    }
    bad
}
