//! Controller configuration, loaded from one TOML file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detectors::AnalyzeConfig;
use crate::executor::ExecuteConfig;
use crate::knowledge::{DigestAlgorithm, JournalOptions};
use crate::planner::{GoalSpec, PlanConfig};
use crate::simenv::SimConfig;
use crate::telemetry::MonitorConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KbConfig {
    /// Journal file. Without one the journal lives in memory only.
    pub journal_path: Option<PathBuf>,
    pub digest: String,
    pub fsync: bool,
}

impl Default for KbConfig {
    fn default() -> Self {
        KbConfig { journal_path: None, digest: "sha256".into(), fsync: true }
    }
}

impl KbConfig {
    pub fn options(&self) -> Result<JournalOptions, ConfigError> {
        let digest: DigestAlgorithm = self.digest.parse().map_err(|e| ConfigError::Invalid(format!("kb.digest: {e}")))?;
        Ok(JournalOptions { fsync: self.fsync, digest })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub addr: String,
    /// Console polling period; advertised through `/api/config`.
    pub poll_interval_ms: u64,
    /// Pause between cycles while the gateway is serving a live run.
    pub tick_interval_ms: u64,
    /// How long a POST waits for the controller to consume it.
    pub decision_timeout_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig { addr: "127.0.0.1:8080".into(), poll_interval_ms: 1000, tick_interval_ms: 100, decision_timeout_ms: 5000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub kb: KbConfig,
    pub monitor: MonitorConfig,
    pub analyze: AnalyzeConfig,
    pub goals: GoalSpec,
    pub plan: PlanConfig,
    pub execute: ExecuteConfig,
    pub sim: SimConfig,
    pub gateway: GatewayConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = ConfigError::Invalid;
        self.kb.options()?;
        if self.monitor.window_len == 0 {
            return Err(invalid("monitor.window_len must be >= 1".into()));
        }
        for f in &self.monitor.filters {
            f.validate().map_err(|e| invalid(format!("monitor.filters: {e}")))?;
        }
        self.analyze.validate().map_err(invalid)?;
        self.goals.validate().map_err(invalid)?;
        self.plan.validate().map_err(invalid)?;
        self.execute.validate().map_err(invalid)?;
        self.sim.validate().map_err(invalid)?;
        if self.gateway.decision_timeout_ms == 0 {
            return Err(invalid("gateway.decision_timeout_ms must be >= 1".into()));
        }
        Ok(())
    }
}
