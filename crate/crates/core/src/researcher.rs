//! Proposal generation: context assembly, the researcher call, and the
//! novelty and sanity gates with bounded rewrite feedback.
//!
//! Proposal reply format: three fenced sections `NAME`, `MOTIVATION` and
//! `CODE`, each non-empty, appearing in that order. A fence marker is a line
//! holding only `[[TAG]]` or `[[/TAG]]`; text outside the sections is ignored.
//! Markdown code fences wrapping the whole code section are stripped.

use std::sync::Arc;

use thiserror::Error;

use crate::cognition::CognitionEntry;
use crate::embedding::{EmbedError, TextEmbedder};
use crate::gateway::{GatewayError, LlmGateway, Message, Task};
use crate::prompts::{fence, tags, PromptError, PromptSet, Sections};
use crate::store::{Archive, ArchitectureRecord, RecordId, RecordStatus, StoreError};

/// Every candidate name starts with this.
pub const NAME_PREFIX: &str = "delta_net_";

/// Identifier the candidate source must define.
pub const ENTRY_POINT: &str = "DeltaNet";

/// Neighbors shown to the novelty judge.
pub const NOVELTY_NEIGHBORS: usize = 5;

pub const DEFAULT_REWRITE_BUDGET: u32 = 3;

#[derive(Debug, Error)]
pub enum ResearchError {
    #[error("researcher reply unusable after {asks} ask(s): {reason}")]
    Unparseable { asks: u32, reason: String },
    #[error("rewrite budget must be at least 1")]
    ZeroBudget,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub name: String,
    pub motivation: String,
    pub code: String,
    /// 1-based attempt within the rewrite loop.
    pub attempt: u32,
    /// Gate feedback received before this attempt, oldest first.
    pub feedback_history: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSummary {
    pub record_id: RecordId,
    pub text: String,
}

/// Everything the researcher sees for one proposal.
#[derive(Debug, Clone)]
pub struct EvolutionContext {
    pub parent: Arc<ArchitectureRecord>,
    /// Freshly generated; never written to the store.
    pub reference_summaries: Vec<ReferenceSummary>,
    pub cognitions: Vec<CognitionEntry>,
    pub baseline_digest: String,
}

/// Condense each reference with the summarizer and bundle the context.
pub fn assemble_context(
    gateway: &LlmGateway,
    prompts: &PromptSet,
    parent: Arc<ArchitectureRecord>,
    references: &[Arc<ArchitectureRecord>],
    cognitions: Vec<CognitionEntry>,
    baseline_digest: String,
) -> Result<EvolutionContext, ResearchError> {
    let mut reference_summaries = Vec::with_capacity(references.len());
    for r in references {
        let block = fence(tags::RECORD, &r.body.digest(Some(r.record_id)));
        let messages = prompts.render(Task::Summarize, &[("record", &block)])?;
        let reply = gateway.chat(Task::Summarize, &messages)?;
        let text = Sections::parse(&reply)
            .ok()
            .and_then(|s| s.first("SUMMARY").map(str::to_string))
            .unwrap_or_else(|| reply.trim().to_string());
        reference_summaries.push(ReferenceSummary {
            record_id: r.record_id,
            text,
        });
    }
    Ok(EvolutionContext {
        parent,
        reference_summaries,
        cognitions,
        baseline_digest,
    })
}

fn parent_block(parent: &ArchitectureRecord) -> String {
    let mut out = fence(tags::PARENT, &parent.body.digest(Some(parent.record_id)));
    out.push('\n');
    out.push_str(&fence(tags::PARENT_MOTIVATION, parent.body.motivation.trim()));
    out.push('\n');
    out.push_str(&fence(tags::PARENT_CODE, &parent.body.code));
    if let Some(a) = parent.body.analysis.as_deref().filter(|a| !a.trim().is_empty()) {
        out.push('\n');
        out.push_str(&fence(tags::PARENT_ANALYSIS, a));
    }
    out
}

fn joined<'a>(tag: &str, items: impl Iterator<Item = &'a str>) -> String {
    items.map(|t| fence(tag, t)).collect::<Vec<_>>().join("\n")
}

/// Prompt slot values for a proposal call.
pub fn proposal_messages(
    prompts: &PromptSet,
    ctx: &EvolutionContext,
    feedback: &[String],
) -> Result<Vec<Message>, PromptError> {
    let parent = parent_block(&ctx.parent);
    let references = joined(
        tags::REFERENCE,
        ctx.reference_summaries.iter().map(|s| s.text.as_str()),
    );
    let notes: Vec<String> = ctx.cognitions.iter().map(CognitionEntry::note).collect();
    let cognitions = joined(tags::COGNITION_NOTE, notes.iter().map(String::as_str));
    let baseline = fence(tags::BASELINE, &ctx.baseline_digest);
    let feedback = joined(tags::FEEDBACK_ITEM, feedback.iter().map(String::as_str));
    prompts.render(
        Task::Propose,
        &[
            ("parent", &parent),
            ("references", &references),
            ("cognitions", &cognitions),
            ("baseline", &baseline),
            ("feedback", &feedback),
        ],
    )
}

/// Fields of a well-formed proposal reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedProposal {
    pub name: String,
    pub motivation: String,
    pub code: String,
}

/// Parse a proposal reply; the error names what is wrong with it.
pub fn parse_proposal(reply: &str) -> Result<ParsedProposal, String> {
    let s = Sections::parse(reply).map_err(|e| e.to_string())?;
    let mut last = None;
    let mut values = Vec::with_capacity(3);
    for tag in ["NAME", "MOTIVATION", "CODE"] {
        let pos = s.position(tag).ok_or_else(|| format!("missing {tag} section"))?;
        if last.is_some_and(|l| pos < l) {
            return Err(format!("{tag} section out of order"));
        }
        last = Some(pos);
        let v = s.first(tag).unwrap_or("").trim();
        if v.is_empty() {
            return Err(format!("empty {tag} section"));
        }
        values.push(v.to_string());
    }
    let code = values.pop().expect("three values");
    let motivation = values.pop().expect("three values");
    let name = values.pop().expect("three values");
    Ok(ParsedProposal {
        name,
        motivation,
        code,
    })
}

/// Collapse whitespace to underscores and enforce the prefix.
pub fn normalize_name(raw: &str) -> (String, Option<String>) {
    let cleaned: String = raw
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_");
    if cleaned.starts_with(NAME_PREFIX) {
        (cleaned, None)
    } else {
        let fixed = format!("{NAME_PREFIX}{cleaned}");
        let warning = format!("proposal name {cleaned:?} lacked the {NAME_PREFIX} prefix; renamed to {fixed}");
        (fixed, Some(warning))
    }
}

/// One researcher call, with one format reminder if the reply is unusable.
pub fn propose(
    gateway: &LlmGateway,
    prompts: &PromptSet,
    ctx: &EvolutionContext,
    feedback: &[String],
    attempt: u32,
) -> Result<Proposal, ResearchError> {
    let mut messages = proposal_messages(prompts, ctx, feedback)?;
    let mut warnings = Vec::new();
    let mut reason = String::new();
    for ask in 1..=2u32 {
        let reply = gateway.chat(Task::Propose, &messages)?;
        match parse_proposal(&reply) {
            Ok(p) => {
                let (name, w) = normalize_name(&p.name);
                if let Some(w) = w {
                    tracing::warn!("{w}");
                    warnings.push(w);
                }
                return Ok(Proposal {
                    name,
                    motivation: p.motivation,
                    code: p.code,
                    attempt,
                    feedback_history: feedback.to_vec(),
                    warnings,
                });
            }
            Err(why) => {
                tracing::warn!(ask, "unusable proposal reply: {why}");
                warnings.push(format!("unusable proposal reply: {why}"));
                reason = why;
                messages.push(Message::assistant(reply));
                messages.push(Message::user(format!(
                    "That reply could not be used ({reason}). Answer again with the sections [[NAME]], [[MOTIVATION]] and [[CODE]], in that order, each opened and closed on its own line."
                )));
            }
        }
    }
    Err(ResearchError::Unparseable { asks: 2, reason })
}

#[derive(Debug, Clone, PartialEq)]
pub enum GateVerdict {
    Pass { warnings: Vec<String> },
    Reject { feedback: String },
}

impl GateVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, GateVerdict::Pass { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoveltyOutcome {
    pub verdict: GateVerdict,
    /// Neighbors shown to the judge, most similar first.
    pub neighbors: Vec<(RecordId, f64)>,
}

enum Verdict {
    Yes,
    No,
    Unknown,
}

fn read_verdict(reply: &str, yes: &str, no: &str) -> (Verdict, Option<String>) {
    let Ok(s) = Sections::parse(reply) else {
        return (Verdict::Unknown, None);
    };
    let word = s
        .first("VERDICT")
        .map(|v| v.trim().to_ascii_lowercase())
        .unwrap_or_default();
    let detail = ["EXPLANATION", "FEEDBACK"]
        .iter()
        .find_map(|t| s.first(t))
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty());
    let first = word.split(|c: char| !c.is_ascii_alphabetic()).next().unwrap_or("");
    let v = if first == yes {
        Verdict::Yes
    } else if first == no {
        Verdict::No
    } else {
        Verdict::Unknown
    };
    (v, detail)
}

/// Ask the judge whether the motivation repeats one of its nearest archived
/// neighbors. An empty index passes without a call.
pub fn novelty_gate(
    gateway: &LlmGateway,
    prompts: &PromptSet,
    archive: &Archive,
    embedder: &dyn TextEmbedder,
    proposal: &Proposal,
) -> Result<NoveltyOutcome, ResearchError> {
    if archive.motivation_index().is_empty() {
        return Ok(NoveltyOutcome {
            verdict: GateVerdict::Pass { warnings: vec![] },
            neighbors: vec![],
        });
    }
    let query = embedder.embed(&proposal.motivation)?;
    let neighbors = archive.nearest_motivations(&query, NOVELTY_NEIGHBORS)?;
    let blocks: Vec<String> = neighbors
        .iter()
        .filter_map(|&(id, sim)| {
            let r = archive.get(id)?;
            Some(fence(
                tags::NEIGHBOR,
                &format!(
                    "record_id: {id}\nstatus: {}\nsimilarity: {sim:.6}\n\n{}",
                    r.body.status,
                    r.body.motivation.trim()
                ),
            ))
        })
        .collect();
    let candidate = fence(tags::CANDIDATE, proposal.motivation.trim());
    let messages = prompts.render(
        Task::NoveltyJudge,
        &[("candidate", &candidate), ("neighbors", &blocks.join("\n"))],
    )?;
    let reply = gateway.chat(Task::NoveltyJudge, &messages)?;
    let verdict = match read_verdict(&reply, "novel", "duplicate") {
        (Verdict::Yes, _) => GateVerdict::Pass { warnings: vec![] },
        (Verdict::No, detail) => GateVerdict::Reject {
            feedback: detail.unwrap_or_else(|| {
                "the idea repeats an earlier design; change the mechanism, not only its scale".into()
            }),
        },
        (Verdict::Unknown, _) => {
            let w = "novelty verdict unreadable; treating the proposal as novel".to_string();
            tracing::warn!("{w}");
            GateVerdict::Pass { warnings: vec![w] }
        }
    };
    Ok(NoveltyOutcome { verdict, neighbors })
}

/// Structural checks that need no model call.
pub fn lint(code: &str) -> Result<(), String> {
    if code.trim().is_empty() {
        return Err("the source is empty".into());
    }
    if !code.contains(ENTRY_POINT) {
        return Err(format!(
            "the source does not define {ENTRY_POINT}; keep the entry-point class named {ENTRY_POINT}"
        ));
    }
    Ok(())
}

/// Lint, then the checker's complexity and causality review.
pub fn sanity_gate(
    gateway: &LlmGateway,
    prompts: &PromptSet,
    proposal: &Proposal,
) -> Result<GateVerdict, ResearchError> {
    if let Err(feedback) = lint(&proposal.code) {
        return Ok(GateVerdict::Reject { feedback });
    }
    let source = fence(tags::SOURCE, &proposal.code);
    let messages = prompts.render(Task::SanityCheck, &[("code", &source)])?;
    let reply = gateway.chat(Task::SanityCheck, &messages)?;
    Ok(match read_verdict(&reply, "pass", "fail") {
        (Verdict::Yes, _) => GateVerdict::Pass { warnings: vec![] },
        (Verdict::No, detail) => GateVerdict::Reject {
            feedback: detail.unwrap_or_else(|| "the checker rejected the source without details".into()),
        },
        (Verdict::Unknown, _) => GateVerdict::Reject {
            feedback: "the checker reply could not be read; resubmit the design".into(),
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Validated {
    Passed(Proposal),
    /// The budget ran out; `status` names the gate that rejected last.
    Exhausted {
        last: Proposal,
        status: RecordStatus,
        feedback_history: Vec<String>,
    },
}

/// Propose, gate, and feed rejections back, up to `budget` proposals.
pub fn propose_validated(
    gateway: &LlmGateway,
    prompts: &PromptSet,
    archive: &Archive,
    embedder: &dyn TextEmbedder,
    ctx: &EvolutionContext,
    budget: u32,
) -> Result<Validated, ResearchError> {
    if budget == 0 {
        return Err(ResearchError::ZeroBudget);
    }
    let mut feedback: Vec<String> = Vec::new();
    let mut last = None;
    for attempt in 1..=budget {
        let mut proposal = propose(gateway, prompts, ctx, &feedback, attempt)?;
        let novelty = novelty_gate(gateway, prompts, archive, embedder, &proposal)?;
        let (verdict, status) = match novelty.verdict {
            GateVerdict::Pass { warnings } => {
                proposal.warnings.extend(warnings);
                (sanity_gate(gateway, prompts, &proposal)?, RecordStatus::RejectedSanity)
            }
            reject => (reject, RecordStatus::RejectedNovelty),
        };
        match verdict {
            GateVerdict::Pass { warnings } => {
                proposal.warnings.extend(warnings);
                return Ok(Validated::Passed(proposal));
            }
            GateVerdict::Reject { feedback: f } => {
                tracing::debug!(attempt, %status, "proposal rejected");
                feedback.push(f);
                last = Some((proposal, status));
            }
        }
    }
    let (last, status) = last.expect("budget >= 1");
    Ok(Validated::Exhausted {
        last,
        status,
        feedback_history: feedback,
    })
}
