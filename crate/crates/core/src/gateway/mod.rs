//! One entry point for every LLM call the engine makes.
//!
//! Each [`Task`] maps to a [`Role`]; each role has a [`RoleProfile`] holding
//! the model, temperature and retry policy. Profiles are the only place model
//! names and temperatures live. Providers are pluggable: an OpenAI-compatible
//! HTTP client for real runs and a deterministic mock for hermetic runs.

mod http;
mod mock;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpChatProvider, HttpEmbedder};
pub use mock::{EchoResponder, HashEmbedder, MockProvider, Responder, ScriptedResponder};

use crate::embedding::{EmbedError, TextEmbedder, UnitVector};

/// Highest temperature a summarizer profile may use.
pub const SUMMARIZER_MAX_TEMPERATURE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Researcher,
    Summarizer,
    Checker,
    Debugger,
    Analyst,
    Judge,
    Classifier,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Researcher,
        Role::Summarizer,
        Role::Checker,
        Role::Debugger,
        Role::Analyst,
        Role::Judge,
        Role::Classifier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Researcher => "researcher",
            Role::Summarizer => "summarizer",
            Role::Checker => "checker",
            Role::Debugger => "debugger",
            Role::Analyst => "analyst",
            Role::Judge => "judge",
            Role::Classifier => "classifier",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a call is for. Several tasks can share a role (the judge role both
/// screens novelty and scores quality).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Summarize,
    Propose,
    NoveltyJudge,
    SanityCheck,
    Debug,
    QualityJudge,
    Analyze,
    Classify,
}

impl Task {
    pub const ALL: [Task; 8] = [
        Task::Summarize,
        Task::Propose,
        Task::NoveltyJudge,
        Task::SanityCheck,
        Task::Debug,
        Task::QualityJudge,
        Task::Analyze,
        Task::Classify,
    ];

    pub fn role(self) -> Role {
        match self {
            Task::Summarize => Role::Summarizer,
            Task::Propose => Role::Researcher,
            Task::NoveltyJudge | Task::QualityJudge => Role::Judge,
            Task::SanityCheck => Role::Checker,
            Task::Debug => Role::Debugger,
            Task::Analyze => Role::Analyst,
            Task::Classify => Role::Classifier,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Summarize => "summarize",
            Task::Propose => "propose",
            Task::NoveltyJudge => "novelty_judge",
            Task::SanityCheck => "sanity_check",
            Task::Debug => "debug",
            Task::QualityJudge => "quality_judge",
            Task::Analyze => "analyze",
            Task::Classify => "classify",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

/// Stable hex digest of a message list.
pub fn digest_messages(messages: &[Message]) -> String {
    let mut h = Sha256::new();
    for m in messages {
        h.update(format!("{:?}", m.role).as_bytes());
        h.update([0u8]);
        h.update(m.content.as_bytes());
        h.update([0xffu8]);
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlternateModel {
    pub model: String,
    /// Probability in [0, 1] that a call uses this model instead.
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleProfile {
    pub model: String,
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub alternate: Option<AlternateModel>,
    /// Minimum spacing between calls for this role.
    #[serde(default)]
    pub min_interval_ms: Option<u64>,
}

fn default_retries() -> u32 {
    3
}

fn default_timeout_secs() -> u64 {
    300
}

impl RoleProfile {
    pub fn new(model: impl Into<String>, temperature: f64) -> Self {
        Self {
            model: model.into(),
            temperature,
            max_retries: default_retries(),
            timeout_secs: default_timeout_secs(),
            alternate: None,
            min_interval_ms: None,
        }
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

/// Check cross-role constraints on a full profile table.
pub fn validate_profiles(profiles: &BTreeMap<Role, RoleProfile>) -> Result<(), GatewayError> {
    for role in Role::ALL {
        let p = profiles
            .get(&role)
            .ok_or(GatewayError::Unconfigured(role))?;
        if !(p.temperature.is_finite() && p.temperature >= 0.0) {
            return Err(GatewayError::Config(format!(
                "{role} temperature must be nonnegative"
            )));
        }
        if let Some(alt) = &p.alternate {
            if !(0.0..=1.0).contains(&alt.probability) {
                return Err(GatewayError::Config(format!(
                    "{role} alternate probability must be in [0, 1]"
                )));
            }
        }
    }
    let summarizer = profiles[&Role::Summarizer].temperature;
    let judge = profiles[&Role::Judge].temperature;
    if summarizer > SUMMARIZER_MAX_TEMPERATURE {
        return Err(GatewayError::Config(format!(
            "summarizer temperature {summarizer} exceeds {SUMMARIZER_MAX_TEMPERATURE}"
        )));
    }
    if judge <= summarizer {
        return Err(GatewayError::Config(format!(
            "judge temperature {judge} must exceed summarizer temperature {summarizer}"
        )));
    }
    Ok(())
}

/// Default profile table used by hermetic runs; model names are placeholders.
pub fn mock_profiles() -> BTreeMap<Role, RoleProfile> {
    Role::ALL
        .into_iter()
        .map(|role| {
            let temperature = match role {
                Role::Summarizer => 0.1,
                Role::Judge => 0.4,
                Role::Checker | Role::Classifier => 0.2,
                Role::Debugger => 0.2,
                Role::Analyst => 0.3,
                Role::Researcher => 0.8,
            };
            (role, RoleProfile::new(format!("mock-{role}"), temperature))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ProviderRequest<'a> {
    pub task: Task,
    pub model: &'a str,
    pub temperature: f64,
    pub timeout: Duration,
    pub messages: &'a [Message],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    /// Network failure, timeout, rate limiting or a 5xx: worth retrying.
    #[error("transport error: {0}")]
    Transport(String),
    /// The provider refused the request; retrying will not help.
    #[error("request rejected: {0}")]
    Rejected(String),
}

pub trait ChatProvider: Send + Sync {
    fn complete(&self, request: &ProviderRequest<'_>) -> Result<Completion, ProviderError>;
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, ProviderError>;
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("role {0} is not configured")]
    Unconfigured(Role),
    #[error("invalid gateway configuration: {0}")]
    Config(String),
    #[error("{task} call failed after {attempts} attempt(s): {last}")]
    Exhausted {
        task: &'static str,
        attempts: u32,
        last: ProviderError,
    },
}

/// Exponential backoff between retries: `base * 2^attempt`, capped.
#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub base: Duration,
    pub cap: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base: Duration::from_millis(500),
            cap: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    pub fn none() -> Self {
        Self {
            base: Duration::ZERO,
            cap: Duration::ZERO,
        }
    }

    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry.min(16)).unwrap_or(u32::MAX);
        self.base.saturating_mul(factor).min(self.cap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallLog {
    pub role: Role,
    pub task: Task,
    pub model: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub retries: u32,
    pub ok: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleCost {
    pub calls: u64,
    pub failed_calls: u64,
    pub retries: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Token accounting, aggregated per role, with the individual call log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    pub by_role: BTreeMap<Role, RoleCost>,
    pub calls: Vec<CallLog>,
}

impl CostLedger {
    fn record(&mut self, log: CallLog) {
        let entry = self.by_role.entry(log.role).or_default();
        entry.calls += 1;
        entry.retries += u64::from(log.retries);
        entry.prompt_tokens += log.prompt_tokens;
        entry.completion_tokens += log.completion_tokens;
        if !log.ok {
            entry.failed_calls += 1;
        }
        self.calls.push(log);
    }

    pub fn total_tokens(&self) -> u64 {
        self.by_role
            .values()
            .map(|c| c.prompt_tokens + c.completion_tokens)
            .sum()
    }
}

struct RateGate {
    next_allowed: Mutex<Instant>,
}

pub struct LlmGateway {
    profiles: BTreeMap<Role, RoleProfile>,
    providers: BTreeMap<Role, Arc<dyn ChatProvider>>,
    embedder: Arc<dyn EmbeddingProvider>,
    embed_retries: u32,
    backoff: Backoff,
    ledger: Mutex<CostLedger>,
    gates: BTreeMap<Role, RateGate>,
}

impl fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmGateway")
            .field("profiles", &self.profiles)
            .finish_non_exhaustive()
    }
}

impl LlmGateway {
    pub fn new(
        profiles: BTreeMap<Role, RoleProfile>,
        providers: BTreeMap<Role, Arc<dyn ChatProvider>>,
        embedder: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, GatewayError> {
        validate_profiles(&profiles)?;
        for role in Role::ALL {
            if !providers.contains_key(&role) {
                return Err(GatewayError::Unconfigured(role));
            }
        }
        let gates = Role::ALL
            .into_iter()
            .map(|r| {
                (
                    r,
                    RateGate {
                        next_allowed: Mutex::new(Instant::now()),
                    },
                )
            })
            .collect();
        Ok(Self {
            profiles,
            providers,
            embedder,
            embed_retries: default_retries(),
            backoff: Backoff::default(),
            ledger: Mutex::new(CostLedger::default()),
            gates,
        })
    }

    /// Every role served by one provider.
    pub fn single_provider(
        profiles: BTreeMap<Role, RoleProfile>,
        provider: Arc<dyn ChatProvider>,
        embedder: Arc<dyn EmbeddingProvider>,
    ) -> Result<Self, GatewayError> {
        let providers = Role::ALL
            .into_iter()
            .map(|r| (r, provider.clone()))
            .collect();
        Self::new(profiles, providers, embedder)
    }

    /// Hermetic gateway: mock profiles, the given responder, hash embeddings.
    pub fn mock(responder: Arc<dyn Responder>, dim: usize) -> Self {
        Self::single_provider(
            mock_profiles(),
            Arc::new(MockProvider::new(responder)),
            Arc::new(HashEmbedder::new(dim)),
        )
        .expect("mock profiles are valid")
        .with_backoff(Backoff::none())
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn profile(&self, role: Role) -> &RoleProfile {
        &self.profiles[&role]
    }

    pub fn ledger(&self) -> CostLedger {
        self.ledger.lock().expect("ledger lock").clone()
    }

    fn pick_model<'a>(&self, profile: &'a RoleProfile, messages: &[Message]) -> &'a str {
        match &profile.alternate {
            Some(alt) if alt.probability > 0.0 => {
                // Deterministic per prompt so replays pick the same model.
                let d = digest_messages(messages);
                let bucket = u64::from_str_radix(&d[..8], 16).unwrap_or(0) as f64
                    / f64::from(u32::MAX);
                if bucket < alt.probability {
                    &alt.model
                } else {
                    &profile.model
                }
            }
            _ => &profile.model,
        }
    }

    fn throttle(&self, role: Role, profile: &RoleProfile) {
        let Some(ms) = profile.min_interval_ms else {
            return;
        };
        let wait = {
            let mut next = self.gates[&role].next_allowed.lock().expect("rate gate");
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + Duration::from_millis(ms);
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    /// Send one prompt, retrying transport failures with exponential backoff.
    pub fn chat(&self, task: Task, messages: &[Message]) -> Result<String, GatewayError> {
        let role = task.role();
        let profile = self
            .profiles
            .get(&role)
            .ok_or(GatewayError::Unconfigured(role))?;
        let provider = self
            .providers
            .get(&role)
            .ok_or(GatewayError::Unconfigured(role))?;
        let model = self.pick_model(profile, messages);
        let request = ProviderRequest {
            task,
            model,
            temperature: profile.temperature,
            timeout: profile.timeout(),
            messages,
        };
        let started = Instant::now();
        let mut retries = 0u32;
        loop {
            self.throttle(role, profile);
            match provider.complete(&request) {
                Ok(c) => {
                    self.log_call(role, task, model, &c, started, retries, true);
                    return Ok(c.text);
                }
                Err(ProviderError::Transport(e)) if retries < profile.max_retries => {
                    tracing::debug!(%role, task = task.as_str(), retry = retries + 1, error = %e, "retrying");
                    std::thread::sleep(self.backoff.delay(retries));
                    retries += 1;
                }
                Err(last) => {
                    let empty = Completion {
                        text: String::new(),
                        prompt_tokens: estimate_tokens_messages(messages),
                        completion_tokens: 0,
                    };
                    self.log_call(role, task, model, &empty, started, retries, false);
                    return Err(GatewayError::Exhausted {
                        task: task.as_str(),
                        attempts: retries + 1,
                        last,
                    });
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn log_call(
        &self,
        role: Role,
        task: Task,
        model: &str,
        c: &Completion,
        started: Instant,
        retries: u32,
        ok: bool,
    ) {
        let log = CallLog {
            role,
            task,
            model: model.to_string(),
            prompt_tokens: c.prompt_tokens,
            completion_tokens: c.completion_tokens,
            latency_ms: started.elapsed().as_millis() as u64,
            retries,
            ok,
        };
        self.ledger.lock().expect("ledger lock").record(log);
    }
}

impl TextEmbedder for LlmGateway {
    fn dim(&self) -> usize {
        self.embedder.dim()
    }

    fn embed(&self, text: &str) -> Result<UnitVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut retries = 0;
        let raw = loop {
            match self.embedder.embed_raw(text) {
                Ok(v) => break v,
                Err(ProviderError::Transport(_)) if retries < self.embed_retries => {
                    std::thread::sleep(self.backoff.delay(retries));
                    retries += 1;
                }
                Err(e) => return Err(EmbedError::Provider(e.to_string())),
            }
        };
        if raw.len() != self.embedder.dim() {
            return Err(EmbedError::Vector(
                crate::embedding::EmbeddingError::DimensionMismatch {
                    expected: self.embedder.dim(),
                    actual: raw.len(),
                },
            ));
        }
        Ok(UnitVector::normalize(raw)?)
    }
}

/// Rough whitespace token count, used when a provider reports no usage.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

fn estimate_tokens_messages(messages: &[Message]) -> u64 {
    messages.iter().map(|m| estimate_tokens(&m.content)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::NORM_TOLERANCE;

    fn gateway_with(responder: Arc<dyn Responder>) -> LlmGateway {
        LlmGateway::mock(responder, 64)
    }

    #[test]
    fn echo_reply_is_deterministic_per_role_and_digest() {
        let gw = gateway_with(Arc::new(EchoResponder));
        let msgs = [Message::user("hello")];
        let a = gw.chat(Task::Summarize, &msgs).unwrap();
        let b = gw.chat(Task::Summarize, &msgs).unwrap();
        assert_eq!(a, b);
        assert!(a.contains("summarizer"));
        let c = gw.chat(Task::Analyze, &msgs).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn transport_errors_are_retried() {
        let script = ScriptedResponder::new();
        script.push(Task::Propose, Err(ProviderError::Transport("reset".into())));
        script.push(Task::Propose, Err(ProviderError::Transport("reset".into())));
        script.push(Task::Propose, Ok("done".into()));
        let gw = gateway_with(Arc::new(script));
        assert_eq!(gw.chat(Task::Propose, &[Message::user("x")]).unwrap(), "done");
        let ledger = gw.ledger();
        assert_eq!(ledger.calls.len(), 1);
        assert_eq!(ledger.calls[0].retries, 2);
        assert_eq!(ledger.by_role[&Role::Researcher].retries, 2);
    }

    #[test]
    fn zero_retries_fails_fast() {
        let script = ScriptedResponder::new();
        script.push(Task::Propose, Err(ProviderError::Transport("down".into())));
        let mut profiles = mock_profiles();
        profiles.get_mut(&Role::Researcher).unwrap().max_retries = 0;
        let gw = LlmGateway::single_provider(
            profiles,
            Arc::new(MockProvider::new(Arc::new(script))),
            Arc::new(HashEmbedder::new(8)),
        )
        .unwrap()
        .with_backoff(Backoff::none());
        let err = gw.chat(Task::Propose, &[Message::user("x")]).unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 1, .. }));
        assert_eq!(gw.ledger().by_role[&Role::Researcher].failed_calls, 1);
    }

    #[test]
    fn rejected_is_not_retried() {
        let script = ScriptedResponder::new();
        script.push(Task::Propose, Err(ProviderError::Rejected("400".into())));
        script.push(Task::Propose, Ok("unused".into()));
        let gw = gateway_with(Arc::new(script));
        assert!(gw.chat(Task::Propose, &[Message::user("x")]).is_err());
    }

    #[test]
    fn profile_constraints() {
        let mut p = mock_profiles();
        assert!(validate_profiles(&p).is_ok());
        p.get_mut(&Role::Summarizer).unwrap().temperature = 0.5;
        assert!(validate_profiles(&p).is_err());
        let mut p = mock_profiles();
        p.get_mut(&Role::Judge).unwrap().temperature = 0.1;
        assert!(validate_profiles(&p).is_err());
        let mut p = mock_profiles();
        p.remove(&Role::Classifier);
        assert!(matches!(
            validate_profiles(&p),
            Err(GatewayError::Unconfigured(Role::Classifier))
        ));
    }

    #[test]
    fn embed_rejects_empty_and_normalizes() {
        let gw = gateway_with(Arc::new(EchoResponder));
        assert!(matches!(gw.embed("  "), Err(EmbedError::EmptyText)));
        let v = gw.embed("gated delta rule").unwrap();
        assert_eq!(v.dim(), 64);
        assert!((v.norm() - 1.0).abs() <= NORM_TOLERANCE);
        assert_eq!(v, gw.embed("gated delta rule").unwrap());
    }

    #[test]
    fn alternate_model_choice_is_deterministic() {
        let mut profiles = mock_profiles();
        profiles.get_mut(&Role::Researcher).unwrap().alternate = Some(AlternateModel {
            model: "alt".into(),
            probability: 1.0,
        });
        let gw = LlmGateway::single_provider(
            profiles,
            Arc::new(MockProvider::new(Arc::new(EchoResponder))),
            Arc::new(HashEmbedder::new(8)),
        )
        .unwrap();
        gw.chat(Task::Propose, &[Message::user("x")]).unwrap();
        assert_eq!(gw.ledger().calls[0].model, "alt");
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let b = Backoff {
            base: Duration::from_millis(100),
            cap: Duration::from_millis(350),
        };
        assert_eq!(b.delay(0), Duration::from_millis(100));
        assert_eq!(b.delay(1), Duration::from_millis(200));
        assert_eq!(b.delay(2), Duration::from_millis(350));
    }
}
