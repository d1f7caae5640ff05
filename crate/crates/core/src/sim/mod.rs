//! Hermetic stand-ins for the language models and the trainer.
//!
//! [`SimLab`] answers every gateway task deterministically from a digest of
//! the prompt. [`SimulatedExecutor`] turns candidate code into a synthetic
//! training run. Together they let a whole campaign run offline and replay
//! byte for byte.
//!
//! Simulated candidates carry their behaviour in the code text:
//!
//! - `# mutation <x>` lines accumulate; their sum sets the candidate's quality.
//! - `# SIM_BUG` makes the run fail; the simulated debugger removes it.
//! - `# SIM_SLOW` makes the run take four times longer; the debugger removes it.
//! - `# SIM_LEAK` makes the final loss 12% below the baseline's.
//! - `# SIM_QUADRATIC` makes the simulated checker reject the code.

mod executor;
mod text;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use executor::{ScriptedExecutor, SimulatedExecutor};

use crate::gateway::{digest_messages, Message, MessageRole, ProviderError, Responder, Task};
use crate::prompts::{fence, tags, Sections};
use crate::reference::BASELINE_SOURCE;

pub const MARK_BUG: &str = "SIM_BUG";
pub const MARK_SLOW: &str = "SIM_SLOW";
pub const MARK_LEAK: &str = "SIM_LEAK";
pub const MARK_QUADRATIC: &str = "SIM_QUADRATIC";

/// Prefix of every simulated reference summary.
pub const SUMMARY_MARK: &str = "SIM-SUMMARY";

/// Behaviour probabilities of the simulated researcher and judges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub p_bug: f64,
    pub p_slow: f64,
    pub p_leak: f64,
    pub p_quadratic: f64,
    /// Chance the proposal reuses the parent's motivation verbatim.
    pub p_repeat: f64,
    /// Chance the proposal reply omits its code section.
    pub p_malformed: f64,
    /// Chance the proposed name lacks the required prefix.
    pub p_bare_name: f64,
    /// Chance the analyst reply omits the shortcomings section.
    pub p_no_shortcomings: f64,
    /// Range of each mutation's effect.
    pub mutation_min: f64,
    pub mutation_max: f64,
    /// Neighbor similarity at or above which the judge calls a duplicate.
    pub duplicate_similarity: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            p_bug: 0.12,
            p_slow: 0.04,
            p_leak: 0.03,
            p_quadratic: 0.06,
            p_repeat: 0.04,
            p_malformed: 0.02,
            p_bare_name: 0.03,
            p_no_shortcomings: 0.05,
            mutation_min: -0.012,
            mutation_max: 0.016,
            duplicate_similarity: 0.97,
        }
    }
}

impl SimConfig {
    /// Every failure mode switched off.
    pub fn clean() -> Self {
        Self {
            p_bug: 0.0,
            p_slow: 0.0,
            p_leak: 0.0,
            p_quadratic: 0.0,
            p_repeat: 0.0,
            p_malformed: 0.0,
            p_bare_name: 0.0,
            p_no_shortcomings: 0.0,
            ..Self::default()
        }
    }
}

/// Sum of every `# mutation <x>` line in `code`.
pub fn mutation_sum(code: &str) -> f64 {
    code.lines()
        .filter_map(|l| l.trim().strip_prefix("# mutation "))
        .filter_map(|v| v.trim().parse::<f64>().ok())
        .sum()
}

/// Bounded quality in (-0.08, 0.08) derived from the mutation sum.
pub fn quality(code: &str) -> f64 {
    0.08 * (mutation_sum(code) / 0.08).tanh()
}

/// The deterministic responder.
#[derive(Debug, Clone, Default)]
pub struct SimLab {
    config: SimConfig,
}

impl SimLab {
    pub fn new(config: SimConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }
}

fn rng_for(task: Task, messages: &[Message]) -> (ChaCha8Rng, String) {
    let digest = digest_messages(messages);
    let mut h = Sha256::new();
    h.update(task.as_str().as_bytes());
    h.update(digest.as_bytes());
    let seed: [u8; 32] = h.finalize().into();
    (ChaCha8Rng::from_seed(seed), digest)
}

fn user_text(messages: &[Message]) -> String {
    messages
        .iter()
        .filter(|m| m.role == MessageRole::User)
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n")
}

/// `key: value` from the lines of a block.
pub(crate) fn field<'a>(block: &'a str, key: &str) -> Option<&'a str> {
    block.lines().find_map(|l| {
        let (k, v) = l.split_once(':')?;
        (k.trim() == key).then(|| v.trim())
    })
}

/// Number following `key ` in `text`, as written by the metrics digest.
pub(crate) fn metric(text: &str, key: &str) -> Option<f64> {
    let pos = text.find(&format!("{key} "))?;
    let rest = &text[pos + key.len() + 1..];
    let end = rest
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == '-'))
        .unwrap_or(rest.len());
    rest[..end].parse().ok()
}

impl SimLab {
    fn propose(&self, rng: &mut ChaCha8Rng, digest: &str, s: &Sections) -> String {
        let c = &self.config;
        let parent_code = s.first(tags::PARENT_CODE).unwrap_or(BASELINE_SOURCE);
        let parent_motivation = s.first(tags::PARENT_MOTIVATION).unwrap_or("");
        let mut code: String = parent_code
            .lines()
            .filter(|l| !l.contains("SIM_"))
            .map(|l| format!("{l}\n"))
            .collect();
        let delta = rng.gen_range(c.mutation_min..c.mutation_max);
        code.push_str(&format!("# mutation {delta:+.6}\n"));
        let retry = s.all(tags::FEEDBACK_ITEM).next().is_some();
        let scale = if retry { 0.5 } else { 1.0 };
        for (p, mark) in [
            (c.p_bug, MARK_BUG),
            (c.p_slow, MARK_SLOW),
            (c.p_leak, MARK_LEAK),
            (c.p_quadratic * scale, MARK_QUADRATIC),
        ] {
            if rng.gen_bool(p.clamp(0.0, 1.0)) {
                code.push_str(&format!("# {mark}\n"));
            }
        }
        let mechanism = text::pick(rng, text::MECHANISMS);
        let motivation = if !parent_motivation.is_empty() && rng.gen_bool(c.p_repeat) {
            parent_motivation.to_string()
        } else {
            text::motivation(rng, mechanism, &digest[..8])
        };
        let slug: String = mechanism
            .split_whitespace()
            .take(2)
            .collect::<Vec<_>>()
            .join("_");
        let name = if rng.gen_bool(c.p_bare_name) {
            format!("{slug}_{}", &digest[..6])
        } else {
            format!("delta_net_{slug}_{}", &digest[..6])
        };
        let mut out = format!("{}\n{}\n", fence("NAME", &name), fence("MOTIVATION", &motivation));
        if !rng.gen_bool(c.p_malformed) {
            out.push_str(&fence("CODE", &code));
        }
        out
    }

    fn novelty(&self, s: &Sections) -> String {
        let candidate = s.first(tags::CANDIDATE).unwrap_or("").trim();
        for n in s.all(tags::NEIGHBOR) {
            let sim: f64 = field(n, "similarity")
                .and_then(|v| v.parse().ok())
                .unwrap_or(0.0);
            let text = n.split_once("\n\n").map(|(_, t)| t.trim()).unwrap_or("");
            if sim >= self.config.duplicate_similarity || (!candidate.is_empty() && text == candidate) {
                let id = field(n, "record_id").unwrap_or("?");
                return format!(
                    "{}\n{}",
                    fence("VERDICT", "duplicate"),
                    fence("EXPLANATION", &format!("restates record {id} (similarity {sim:.4})"))
                );
            }
        }
        format!(
            "{}\n{}",
            fence("VERDICT", "novel"),
            fence("EXPLANATION", "no earlier idea uses this mechanism")
        )
    }

    fn sanity(&self, s: &Sections) -> String {
        let code = s.first(tags::SOURCE).unwrap_or("");
        if code.contains(MARK_QUADRATIC) {
            format!(
                "{}\n{}",
                fence("VERDICT", "fail"),
                fence(
                    "FEEDBACK",
                    "the pairwise interaction inside the chunk loop makes cost cubic in sequence length; restrict it to a fixed window"
                )
            )
        } else {
            format!("{}\n{}", fence("VERDICT", "pass"), fence("FEEDBACK", "no problems found"))
        }
    }

    fn debug(&self, s: &Sections) -> String {
        let code = s.first(tags::SOURCE).unwrap_or("");
        let fixed: String = code
            .lines()
            .filter(|l| !l.contains(MARK_BUG) && !l.contains(MARK_SLOW))
            .map(|l| format!("{l}\n"))
            .collect();
        fence("CODE", &fixed)
    }

    fn judge(&self, rng: &mut ChaCha8Rng, s: &Sections) -> String {
        let m = s.first(tags::METRICS).unwrap_or("");
        let b = s.all(tags::BASELINE).next().unwrap_or("");
        let r_loss = match (metric(m, "final_loss"), metric(b, "final_loss")) {
            (Some(c), Some(b)) if b > 0.0 => (b - c) / b,
            _ => 0.0,
        };
        let r_bench = match (metric(m, "benchmark_mean"), metric(b, "benchmark_mean")) {
            (Some(c), Some(b)) if b > 0.0 => (c - b) / b,
            _ => 0.0,
        };
        let noise: f64 = rng.gen_range(-0.5..0.5);
        let score = (5.0 + 40.0 * r_loss + 20.0 * r_bench + noise).round().clamp(1.0, 10.0);
        fence("SCORE", &format!("{score}"))
    }

    fn analyze(&self, rng: &mut ChaCha8Rng, s: &Sections) -> String {
        let record = s.first(tags::RECORD).unwrap_or("");
        let name = field(record, "name").unwrap_or("candidate");
        let parent = s
            .first(tags::PARENT)
            .and_then(|p| field(p, "name"))
            .unwrap_or("none");
        let siblings = s.all(tags::SIBLING).count();
        let weakness = text::pick(rng, text::WEAKNESSES);
        let analysis = format!(
            "{name} was compared against parent {parent} and {siblings} sibling(s). The change shifts loss and benchmark results as listed.\n\nRemaining issue: {weakness}."
        );
        if rng.gen_bool(self.config.p_no_shortcomings) {
            fence("ANALYSIS", &analysis)
        } else {
            format!("{}\n{}", fence("ANALYSIS", &analysis), fence("SHORTCOMINGS", weakness))
        }
    }

    fn classify(&self, rng: &mut ChaCha8Rng, s: &Sections) -> String {
        let taxonomy: Vec<&str> = s
            .first(tags::TAXONOMY)
            .map(|t| t.lines().map(str::trim).filter(|l| !l.is_empty()).collect())
            .unwrap_or_default();
        let mut components = Vec::new();
        if !taxonomy.is_empty() {
            for _ in 0..rng.gen_range(1..=2) {
                let c = taxonomy[rng.gen_range(0..taxonomy.len())];
                if !components.contains(&c) {
                    components.push(c);
                }
            }
        }
        let has_cognition = s.all(tags::COGNITION_NOTE).next().is_some();
        let has_analysis = s.first(tags::PARENT_ANALYSIS).is_some_and(|a| !a.trim().is_empty());
        let roll: f64 = rng.gen();
        let provenance = match (has_cognition, has_analysis) {
            (true, true) if roll < 0.5 => "cognition",
            (true, true) if roll < 0.9 => "analysis",
            (true, false) if roll < 0.85 => "cognition",
            (false, true) if roll < 0.85 => "analysis",
            _ => "original",
        };
        format!(
            "{}\n{}",
            fence("COMPONENTS", &components.join(", ")),
            fence("PROVENANCE", provenance)
        )
    }

    fn summarize(&self, s: &Sections) -> String {
        let record = s.first(tags::RECORD).unwrap_or("");
        let name = field(record, "name").unwrap_or("unnamed");
        let motivation = record
            .split_once("\n\n")
            .map(|(_, m)| m)
            .unwrap_or("")
            .trim();
        let first = motivation.split(". ").next().unwrap_or("").trim_end_matches('.');
        fence("SUMMARY", &format!("{SUMMARY_MARK} {name}: {first}."))
    }
}

impl Responder for SimLab {
    fn respond(&self, task: Task, messages: &[Message]) -> Result<String, ProviderError> {
        let (mut rng, digest) = rng_for(task, messages);
        let text = user_text(messages);
        let s = Sections::parse(&text).unwrap_or_default();
        Ok(match task {
            Task::Summarize => self.summarize(&s),
            Task::Propose => self.propose(&mut rng, &digest, &s),
            Task::NoveltyJudge => self.novelty(&s),
            Task::SanityCheck => self.sanity(&s),
            Task::Debug => self.debug(&s),
            Task::QualityJudge => self.judge(&mut rng, &s),
            Task::Analyze => self.analyze(&mut rng, &s),
            Task::Classify => self.classify(&mut rng, &s),
        })
    }
}
