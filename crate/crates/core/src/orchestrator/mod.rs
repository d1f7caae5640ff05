//! Campaign driver: seeds the baseline, runs evolution cycles in parallel
//! rounds, maintains the candidate pool and promotes survivors to the
//! verification stage.
//!
//! A campaign advances in rounds of `round_size` cycle slots. Every slot in a
//! round reads the archive and pool snapshot taken when the round began and
//! derives its randomness from `(campaign seed, slot)`. Results are appended
//! in slot order, and the pool rebuild check runs after every append. The
//! store contents therefore depend only on the configuration, never on the
//! worker count or thread scheduling, whenever the providers are
//! deterministic.

mod campaign;
mod cycle;
mod verify;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use campaign::{CampaignSummary, RebuildEvent, StopReason, POOL_DIR, REBUILD_LOG};
pub use cycle::RoundView;
pub use verify::{promote_to_verification, SotaEntry, VerificationSummary};

use crate::analyst;
use crate::cognition::{CognitionBase, CognitionError};
use crate::config::{CampaignConfig, ConfigError, ExecutorKind, GatewayMode};
use crate::embedding::TextEmbedder;
use crate::engineer::{execute, Executor, RunJob, SubprocessExecutor, WorkspaceAllocator};
use crate::fitness::{FitnessBreakdown, FitnessError};
use crate::gateway::{GatewayError, HttpChatProvider, HttpEmbedder, LlmGateway, Role, RoleProfile};
use crate::prompts::{fence, tags, PromptError, PromptSet};
use crate::reference::{self, BASELINE_SOURCE};
use crate::sim::{SimLab, SimulatedExecutor};
use crate::store::{
    ArchitectureRecord, CampaignHeader, RecordDraft, RecordId, RecordStatus, RecordStore, Stage,
    StoreError, StoreOptions,
};

/// File holding the cognition base inside a campaign directory.
pub const COGNITION_FILE: &str = "cognitions.jsonl";
/// Campaign summary written after each run.
pub const SUMMARY_FILE: &str = "summary.json";
/// Token accounting per role.
pub const COST_FILE: &str = "cost_ledger.json";

pub const BASELINE_NAME: &str = "delta_net";

const BASELINE_MOTIVATION: &str = "Reference delta-rule layer. Every token writes a key to value association into a matrix state, correcting what the state already predicts for that key with a learned write strength, and each query reads the current state.";

const BASELINE_ANALYSIS: &str = "Reference model. It fixes the loss and benchmark levels every candidate is compared with.\n\nA single state shared by all tokens saturates on long inputs, and the write strength depends only on the current token.";

const BASELINE_SHORTCOMINGS: &str = "a single recurrent state saturates over long contexts, recall of early tokens degrades, and the write strength is not adapted to content";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Cognition(#[from] CognitionError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Fitness(#[from] FitnessError),
    #[error("baseline run failed: {0}")]
    Baseline(String),
    #[error("no {0} baseline has been seeded")]
    MissingBaseline(Stage),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OrchestratorError + '_ {
    move |source| OrchestratorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Seed for one cycle slot.
pub fn slot_seed(campaign_seed: u64, slot: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(campaign_seed.to_le_bytes());
    h.update(slot.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Gateway described by the configuration.
pub fn build_gateway(config: &CampaignConfig) -> Result<Arc<LlmGateway>, OrchestratorError> {
    match config.gateway.mode {
        GatewayMode::Simulated => Ok(Arc::new(LlmGateway::mock(
            Arc::new(SimLab::new(config.gateway.sim.clone())),
            config.embedding_dim,
        ))),
        GatewayMode::Http => {
            let key = |var: &str| std::env::var(var).ok();
            let mut profiles = std::collections::BTreeMap::<Role, RoleProfile>::new();
            let mut providers = std::collections::BTreeMap::new();
            for (role, p) in &config.gateway.roles {
                let provider = HttpChatProvider::new(p.base_url.clone(), key(&p.api_key_env))
                    .map_err(|e| GatewayError::Config(e.to_string()))?;
                profiles.insert(*role, p.profile.clone());
                providers.insert(*role, Arc::new(provider) as Arc<dyn crate::gateway::ChatProvider>);
            }
            let e = config
                .gateway
                .embedding
                .as_ref()
                .ok_or_else(|| GatewayError::Config("gateway.embedding is missing".into()))?;
            let embedder = HttpEmbedder::new(
                e.base_url.clone(),
                e.model.clone(),
                key(&e.api_key_env),
                config.embedding_dim,
                std::time::Duration::from_secs(e.timeout_secs),
            )
            .map_err(|err| GatewayError::Config(err.to_string()))?;
            Ok(Arc::new(LlmGateway::new(profiles, providers, Arc::new(embedder))?))
        }
    }
}

/// Executor described by the configuration.
pub fn build_executor(config: &CampaignConfig, campaign_dir: Option<&Path>) -> Arc<dyn Executor> {
    let x = &config.executor;
    match x.kind {
        ExecutorKind::Simulated => Arc::new(
            SimulatedExecutor::new(reference::delta_net())
                .with_durations(x.sim_exploration_seconds, x.sim_verification_seconds),
        ),
        ExecutorKind::Subprocess => {
            let root = x
                .workspace_root
                .clone()
                .or_else(|| campaign_dir.map(|d| d.join("workspaces")))
                .unwrap_or_else(|| std::env::temp_dir().join("evoarch-workspaces"));
            let program = x
                .program
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned())
                .unwrap_or_default();
            Arc::new(
                SubprocessExecutor::new(program, x.args.clone(), WorkspaceAllocator::new(root))
                    .with_poll_interval(std::time::Duration::from_millis(x.poll_ms.max(1))),
            )
        }
    }
}

fn prompt_set(config: &CampaignConfig) -> Result<PromptSet, PromptError> {
    match &config.prompts_dir {
        Some(dir) => PromptSet::with_overrides(dir),
        None => Ok(PromptSet::builtin()),
    }
}

/// Everything a campaign needs, shared by all workers.
pub struct Engine {
    config: CampaignConfig,
    gateway: Arc<LlmGateway>,
    prompts: PromptSet,
    store: Arc<RecordStore>,
    cognitions: Arc<CognitionBase>,
    executor: Arc<dyn Executor>,
    dir: Option<PathBuf>,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("dir", &self.dir)
            .field("store", &self.store)
            .finish_non_exhaustive()
    }
}

impl Engine {
    /// Assemble an engine from parts. The store must already use `gateway`
    /// (or an equivalent embedder) for motivation embeddings.
    pub fn from_parts(
        config: CampaignConfig,
        gateway: Arc<LlmGateway>,
        prompts: PromptSet,
        store: Arc<RecordStore>,
        cognitions: Arc<CognitionBase>,
        executor: Arc<dyn Executor>,
    ) -> Self {
        Self {
            config,
            gateway,
            prompts,
            store,
            cognitions,
            executor,
            dir: None,
        }
    }

    fn header(config: &CampaignConfig) -> CampaignHeader {
        let mut h = CampaignHeader::new(config.embedding_dim, config.task_set.clone());
        h.index_rejected_motivations = config.index_rejected_motivations;
        h.config_hash = config.hash();
        h
    }

    /// In-memory campaign with the simulated gateway and executor described by `config`.
    pub fn hermetic(config: CampaignConfig, cognitions: CognitionBase) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let gateway = build_gateway(&config)?;
        let store = RecordStore::in_memory(Self::header(&config), gateway.clone() as Arc<dyn TextEmbedder>)?;
        let executor = build_executor(&config, None);
        let prompts = prompt_set(&config)?;
        let engine = Self::from_parts(config, gateway, prompts, Arc::new(store), Arc::new(cognitions), executor);
        engine.seed_baseline(Stage::Exploration)?;
        Ok(engine)
    }

    /// Open the campaign in `dir`, creating it (and ingesting
    /// `cognition_dir`) if it does not exist yet.
    pub fn open_or_create(config: CampaignConfig, dir: &Path) -> Result<Self, OrchestratorError> {
        config.validate()?;
        let gateway = build_gateway(&config)?;
        let embedder = gateway.clone() as Arc<dyn TextEmbedder>;
        let options = StoreOptions {
            sync: config.sync_writes,
        };
        let existing = dir.join(crate::store::HEADER_FILE).exists();
        let store = if existing {
            let store = RecordStore::open(dir, embedder, options)?;
            let hash = config.hash();
            if store.header().config_hash != hash {
                tracing::warn!("configuration differs from the one the campaign was created with");
            }
            store
        } else {
            RecordStore::create(dir, Self::header(&config), embedder, options)?
        };
        let cognition_path = dir.join(COGNITION_FILE);
        let mut cognitions = CognitionBase::load(&cognition_path, config.embedding_dim)?;
        if !existing {
            if let Some(cdir) = &config.cognition_dir {
                let out = cognitions.ingest_dir(cdir, gateway.as_ref())?;
                tracing::info!(added = out.added, skipped = out.skipped_duplicates, "ingested cognition documents");
                cognitions.save(&cognition_path)?;
            }
        }
        let executor = build_executor(&config, Some(dir));
        let prompts = prompt_set(&config)?;
        let mut engine = Self::from_parts(config, gateway, prompts, Arc::new(store), Arc::new(cognitions), executor);
        engine.dir = Some(dir.to_path_buf());
        engine.seed_baseline(Stage::Exploration)?;
        Ok(engine)
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<RecordStore> {
        &self.store
    }

    pub fn gateway(&self) -> &Arc<LlmGateway> {
        &self.gateway
    }

    pub fn prompts(&self) -> &PromptSet {
        &self.prompts
    }

    pub fn cognitions(&self) -> &CognitionBase {
        &self.cognitions
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    /// Baseline record of `stage`, running and recording it first if needed.
    pub fn seed_baseline(&self, stage: Stage) -> Result<RecordId, OrchestratorError> {
        if let Some(b) = self.store.baseline(stage) {
            return Ok(b.record_id);
        }
        let stage_cfg = self.config.stage(stage);
        let job = RunJob {
            name: BASELINE_NAME,
            motivation: BASELINE_MOTIVATION,
            code: BASELINE_SOURCE,
            stage: stage_cfg,
            task_set: &self.config.task_set,
            seed: slot_seed(self.config.seed, u64::MAX),
            attempt: 0,
        };
        let report = execute(self.executor.as_ref(), &job, &[], &[]);
        let metrics = match (&report.metrics, report.is_ok()) {
            (Some(m), true) => m.clone(),
            _ => {
                return Err(OrchestratorError::Baseline(format!(
                    "{}: {}",
                    report.status.as_str(),
                    crate::engineer::tail(&report.error_log, 2000)
                )))
            }
        };
        let mut draft = RecordDraft::new(BASELINE_NAME, BASELINE_MOTIVATION, BASELINE_SOURCE);
        draft.stage = stage;
        draft.status = RecordStatus::Accepted;
        draft.metrics = Some(metrics);
        draft.fitness = Some(FitnessBreakdown::score(0.0, 0.0, 5.0)?);
        draft.analysis = Some(BASELINE_ANALYSIS.into());
        draft.shortcomings = Some(BASELINE_SHORTCOMINGS.into());
        draft.cognition_refs =
            analyst::retrieve_refs(&self.cognitions, BASELINE_SHORTCOMINGS, self.gateway.as_ref())?;
        draft.wall_seconds = report.wall_seconds;
        draft.train_seconds = Some(report.wall_seconds);
        let id = self.store.append_record(draft)?;
        self.store.set_baseline(stage, id)?;
        tracing::info!(%stage, record_id = id, "seeded baseline");
        Ok(id)
    }

    fn baseline(&self, stage: Stage) -> Result<Arc<ArchitectureRecord>, OrchestratorError> {
        self.store
            .baseline(stage)
            .ok_or(OrchestratorError::MissingBaseline(stage))
    }

    /// Reference blocks shown to the judge and the analyst for `stage`.
    pub fn baseline_blocks(&self, baseline: &ArchitectureRecord) -> String {
        let own = baseline
            .body
            .metrics
            .as_ref()
            .map(|m| m.digest())
            .unwrap_or_default();
        format!(
            "{}\n{}",
            fence(
                tags::BASELINE,
                &format!("model: {BASELINE_NAME}\nanchor score: 5\n{own}")
            ),
            fence(
                tags::BASELINE,
                &format!(
                    "model: gated_delta_net\nanchor score: 10\n{}",
                    reference::gated_delta_net().digest()
                )
            )
        )
    }

    fn write_json(&self, file: &str, value: &impl serde::Serialize) -> Result<(), OrchestratorError> {
        let Some(dir) = &self.dir else {
            return Ok(());
        };
        let path = dir.join(file);
        let text = serde_json::to_string_pretty(value).map_err(|source| OrchestratorError::Json {
            context: file.to_string(),
            source,
        })?;
        fs::write(&path, text).map_err(io_err(&path))
    }

    /// Replace the cognition base and persist it with the campaign.
    pub fn set_cognitions(&mut self, base: CognitionBase) -> Result<(), OrchestratorError> {
        if let Some(dir) = &self.dir {
            base.save(&dir.join(COGNITION_FILE))?;
        }
        self.cognitions = Arc::new(base);
        Ok(())
    }
}
