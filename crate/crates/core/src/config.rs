//! Declarative campaign configuration, read from one TOML file.
//!
//! Credentials never appear in the file; each provider names the environment
//! variable that holds its key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engineer::StageConfig;
use crate::gateway::{Role, RoleProfile};
use crate::pool::PoolPolicy;
use crate::reference;
use crate::sim::SimConfig;
use crate::store::Stage;

pub const DEFAULT_API_KEY_ENV: &str = "EVOARCH_API_KEY";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopCondition {
    /// Stop once this many accepted records exist, the seeded baseline included.
    pub max_accepted: Option<usize>,
    /// Stop after this many cycles.
    pub max_cycles: Option<u64>,
    /// Stop once cycle compute reaches this many hours.
    pub max_compute_hours: Option<f64>,
}

impl Default for StopCondition {
    fn default() -> Self {
        Self {
            max_accepted: Some(300),
            max_cycles: None,
            max_compute_hours: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayMode {
    /// SimLab answers every call; no network.
    Simulated,
    /// Chat-completions and embeddings endpoints over HTTP.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub base_url: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(flatten)]
    pub profile: RoleProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_embed_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.into()
}

fn default_embed_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub mode: GatewayMode,
    pub sim: SimConfig,
    /// Required for every role in http mode.
    pub roles: BTreeMap<Role, ProviderConfig>,
    pub embedding: Option<EmbeddingConfig>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            mode: GatewayMode::Simulated,
            sim: SimConfig::default(),
            roles: BTreeMap::new(),
            embedding: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorKind {
    Simulated,
    Subprocess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    pub kind: ExecutorKind,
    /// Trainer program for the subprocess executor; it receives the workspace path last.
    pub program: Option<PathBuf>,
    pub args: Vec<String>,
    /// Where run workspaces are created; defaults to `<campaign>/workspaces`.
    pub workspace_root: Option<PathBuf>,
    pub poll_ms: u64,
    /// Simulated seconds of a baseline-speed run.
    pub sim_exploration_seconds: f64,
    pub sim_verification_seconds: f64,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            kind: ExecutorKind::Simulated,
            program: None,
            args: Vec::new(),
            workspace_root: None,
            poll_ms: 200,
            sim_exploration_seconds: 36_000.0,
            sim_verification_seconds: 180_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub seed: u64,
    pub workers: usize,
    /// Cycles per round. Every cycle in a round sees the archive as it was
    /// when the round began, so results do not depend on `workers`.
    pub round_size: usize,
    pub embedding_dim: usize,
    /// Benchmark tasks every run must report.
    pub task_set: Vec<String>,
    /// Index rejected proposals' motivations for the novelty gate.
    pub index_rejected_motivations: bool,
    pub rewrite_budget: u32,
    pub pool: PoolPolicy,
    pub stop: StopCondition,
    pub exploration: StageConfig,
    pub verification: StageConfig,
    pub gateway: GatewayConfig,
    pub executor: ExecutorConfig,
    /// Directory of prompt template overrides, one `<task>.txt` per task.
    pub prompts_dir: Option<PathBuf>,
    /// Cognition documents ingested when a campaign is created.
    pub cognition_dir: Option<PathBuf>,
    /// `fsync` the record log after every append.
    pub sync_writes: bool,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 4,
            round_size: 8,
            embedding_dim: 256,
            task_set: reference::task_set(),
            index_rejected_motivations: true,
            rewrite_budget: 3,
            pool: PoolPolicy::default(),
            stop: StopCondition::default(),
            exploration: StageConfig::exploration(),
            verification: StageConfig::verification(),
            gateway: GatewayConfig::default(),
            executor: ExecutorConfig::default(),
            prompts_dir: None,
            cognition_dir: None,
            sync_writes: true,
        }
    }
}

impl CampaignConfig {
    /// Parse TOML text. Relative paths stay relative to the caller's directory.
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        let mut cfg: Self = toml::from_str(text)?;
        cfg.exploration.stage = Stage::Exploration;
        cfg.verification.stage = Stage::Verification;
        Ok(cfg)
    }

    /// Read and validate a file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(v) = p.as_mut() {
                if v.is_relative() {
                    *v = base.join(&*v);
                }
            }
        };
        resolve(&mut cfg.prompts_dir);
        resolve(&mut cfg.cognition_dir);
        if cfg.executor.program.as_ref().is_some_and(|p| p.components().count() > 1) {
            resolve(&mut cfg.executor.program);
        }
        resolve(&mut cfg.executor.workspace_root);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.round_size == 0 {
            return bad("round_size must be at least 1".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive".into());
        }
        if self.task_set.is_empty() {
            return bad("task_set must name at least one task".into());
        }
        if self.rewrite_budget == 0 {
            return bad("rewrite_budget must be at least 1".into());
        }
        let p = &self.pool;
        if p.cold_start < p.rebuild_batch {
            return bad(format!(
                "pool.cold_start {} is below pool.rebuild_batch {}",
                p.cold_start, p.rebuild_batch
            ));
        }
        if p.rebuild_batch == 0 || p.size == 0 || p.parent_ranks == 0 {
            return bad("pool sizes must be positive".into());
        }
        let s = &self.stop;
        if s.max_accepted.is_none() && s.max_cycles.is_none() && s.max_compute_hours.is_none() {
            return bad("stop needs at least one of max_accepted, max_cycles, max_compute_hours".into());
        }
        if let Some(h) = s.max_compute_hours {
            if !(h.is_finite() && h > 0.0) {
                return bad("stop.max_compute_hours must be positive".into());
            }
        }
        for stage in [&self.exploration, &self.verification] {
            stage
                .validate()
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.gateway.mode == GatewayMode::Http {
            for role in Role::ALL {
                if !self.gateway.roles.contains_key(&role) {
                    return bad(format!("gateway.roles.{role} is required in http mode"));
                }
            }
            if self.gateway.embedding.is_none() {
                return bad("gateway.embedding is required in http mode".into());
            }
        }
        if self.executor.kind == ExecutorKind::Subprocess && self.executor.program.is_none() {
            return bad("executor.program is required for the subprocess executor".into());
        }
        Ok(())
    }

    /// Hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Exploration => &self.exploration,
            Stage::Verification => &self.verification,
        }
    }
}
