//! Post-experiment analysis with parent and sibling context.

use std::sync::Arc;

use thiserror::Error;

use crate::cognition::{CognitionBase, CognitionEntry, CognitionError, DEFAULT_K};
use crate::embedding::TextEmbedder;
use crate::gateway::{GatewayError, LlmGateway, Task};
use crate::prompts::{fence, tags, PromptError, PromptSet, Sections};
use crate::store::{Archive, ArchitectureRecord, CognitionId, RecordDraft, RecordId};

/// Most recent accepted siblings shown to the analyst.
pub const SIBLING_CAP: usize = 3;

#[derive(Debug, Error)]
pub enum AnalystError {
    #[error("analyst reply has no analysis text")]
    Empty,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Cognition(#[from] CognitionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisResult {
    pub analysis_text: String,
    pub shortcomings_query: String,
    /// At most three, most similar first.
    pub cognition_refs: Vec<CognitionId>,
    pub warnings: Vec<String>,
}

/// Accepted records sharing `parent`, newest first, excluding `exclude`.
pub fn recent_siblings(
    archive: &Archive,
    parent: Option<RecordId>,
    exclude: Option<RecordId>,
    cap: usize,
) -> Vec<Arc<ArchitectureRecord>> {
    let Some(parent) = parent else {
        return Vec::new();
    };
    archive
        .children_of(parent)
        .iter()
        .rev()
        .filter(|&&id| Some(id) != exclude)
        .filter_map(|&id| archive.get(id))
        .filter(|r| r.is_accepted())
        .take(cap)
        .cloned()
        .collect()
}

/// Last non-empty paragraph of `text`.
pub fn last_paragraph(text: &str) -> &str {
    text.split("\n\n")
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .last()
        .unwrap_or("")
}

/// Ask the analyst to interpret `record` against its parent and siblings.
///
/// `baselines` holds one fenced `BASELINE` block per reference model.
pub fn analyze(
    gateway: &LlmGateway,
    prompts: &PromptSet,
    record: &RecordDraft,
    parent: Option<&ArchitectureRecord>,
    siblings: &[Arc<ArchitectureRecord>],
    baselines: &str,
) -> Result<AnalysisResult, AnalystError> {
    let record_block = fence(tags::RECORD, &record.digest(None));
    let parent_block = parent
        .map(|p| fence(tags::PARENT, &p.body.digest(Some(p.record_id))))
        .unwrap_or_default();
    let sibling_blocks: Vec<String> = siblings
        .iter()
        .map(|s| fence(tags::SIBLING, &s.body.digest(Some(s.record_id))))
        .collect();
    let messages = prompts.render(
        Task::Analyze,
        &[
            ("record", &record_block),
            ("baselines", baselines),
            ("parent", &parent_block),
            ("siblings", &sibling_blocks.join("\n")),
        ],
    )?;
    let reply = gateway.chat(Task::Analyze, &messages)?;
    let sections = Sections::parse(&reply).unwrap_or_default();
    let analysis_text = sections
        .first("ANALYSIS")
        .map(str::to_string)
        .unwrap_or_else(|| reply.trim().to_string());
    if analysis_text.trim().is_empty() {
        return Err(AnalystError::Empty);
    }
    let mut warnings = Vec::new();
    let shortcomings_query = match sections.first("SHORTCOMINGS").map(str::trim).filter(|s| !s.is_empty()) {
        Some(s) => s.to_string(),
        None => {
            let w = "analyst reply has no shortcomings section; using the last paragraph".to_string();
            tracing::warn!("{w}");
            warnings.push(w);
            last_paragraph(&analysis_text).to_string()
        }
    };
    Ok(AnalysisResult {
        analysis_text,
        shortcomings_query,
        cognition_refs: Vec::new(),
        warnings,
    })
}

/// Ids of the entries most similar to `query`.
pub fn retrieve_refs(
    base: &CognitionBase,
    query: &str,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<CognitionId>, CognitionError> {
    Ok(base
        .retrieve_text(query, DEFAULT_K, embedder)?
        .into_iter()
        .map(|(e, _)| e.cognition_id)
        .collect())
}

/// Notes a child of `parent` is shown: the parent's stored references, or
/// a fresh retrieval on its shortcomings when it has none.
pub fn parent_cognitions(
    base: &CognitionBase,
    parent: &ArchitectureRecord,
    embedder: &dyn TextEmbedder,
) -> Vec<CognitionEntry> {
    if !parent.body.cognition_refs.is_empty() {
        return parent
            .body
            .cognition_refs
            .iter()
            .filter_map(|&id| base.get(id).cloned())
            .collect();
    }
    let query = parent.body.shortcomings.as_deref().unwrap_or("");
    base.retrieve_text(query, DEFAULT_K, embedder)
        .map(|hits| hits.into_iter().map(|(e, _)| e.clone()).collect())
        .unwrap_or_default()
}
