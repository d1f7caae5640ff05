//! Literature-derived design notes and their retrieval index.
//!
//! A cognition document holds one to three `<COGNITION>` blocks. Each block is
//! made of tagged sections, one tag per line:
//!
//! ```text
//! <COGNITION>
//! <DESIGN_INSIGHT>
//! ...
//! </DESIGN_INSIGHT>
//! <EXPERIMENTAL_TRIGGER_PATTERNS>
//! ...
//! </EXPERIMENTAL_TRIGGER_PATTERNS>
//! <ALGORITHMIC_INNOVATION>
//! ...
//! </ALGORITHMIC_INNOVATION>
//! <IMPLEMENTATION_GUIDANCE>
//! ...
//! </IMPLEMENTATION_GUIDANCE>
//! </COGNITION>
//! ```
//!
//! Field mapping:
//!
//! | entry field          | source section                                   |
//! |----------------------|--------------------------------------------------|
//! | `scenario`           | `EXPERIMENTAL_TRIGGER_PATTERNS` (required)       |
//! | `algorithm`          | `ALGORITHMIC_INNOVATION` (required)              |
//! | `historical_context` | `HISTORICAL_TECHNICAL_CONTEXT` inside the block, |
//! |                      | else the one in a `<PAPER_BACKGROUND>` block,    |
//! |                      | else `DESIGN_INSIGHT`                            |
//!
//! `IMPLEMENTATION_GUIDANCE` is optional and appended to `algorithm`. A section
//! may also be written inline as `<TAG>text</TAG>`. Text outside top-level
//! blocks is ignored.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{self, EmbedError, TextEmbedder, UnitVector};
use crate::store::CognitionId;

/// Maximum number of blocks one document may contribute.
pub const MAX_BLOCKS_PER_DOCUMENT: usize = 3;

/// Entries retrieved per query by default.
pub const DEFAULT_K: usize = 3;

const BLOCK: &str = "COGNITION";
const BACKGROUND: &str = "PAPER_BACKGROUND";
const INSIGHT: &str = "DESIGN_INSIGHT";
const TRIGGERS: &str = "EXPERIMENTAL_TRIGGER_PATTERNS";
const INNOVATION: &str = "ALGORITHMIC_INNOVATION";
const GUIDANCE: &str = "IMPLEMENTATION_GUIDANCE";
const HISTORY: &str = "HISTORICAL_TECHNICAL_CONTEXT";
const BLOCK_SECTIONS: [&str; 5] = [INSIGHT, TRIGGERS, INNOVATION, GUIDANCE, HISTORY];

#[derive(Debug, Error)]
pub enum CognitionError {
    #[error("{source_id}:{line}: {message}")]
    Malformed {
        source_id: String,
        line: usize,
        message: String,
    },
    #[error("{source_id}: {found} cognition blocks, expected 1 to {MAX_BLOCKS_PER_DOCUMENT}")]
    BlockCount { source_id: String, found: usize },
    #[error("embedding dimension {actual} differs from base dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// A parsed block before embedding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedCognition {
    pub scenario: String,
    pub algorithm: String,
    pub historical_context: String,
    /// Line of the opening `<COGNITION>` tag.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CognitionEntry {
    pub cognition_id: CognitionId,
    pub scenario: String,
    pub algorithm: String,
    pub historical_context: String,
    /// Document identifier, usually the file stem.
    pub source: String,
    pub scenario_embedding: UnitVector,
}

impl CognitionEntry {
    /// Text rendering used inside prompts.
    pub fn note(&self) -> String {
        format!(
            "cognition_id: {}\nsource: {}\nscenario: {}\nalgorithm: {}\ncontext: {}",
            self.cognition_id,
            self.source,
            one_line(&self.scenario),
            one_line(&self.algorithm),
            one_line(&self.historical_context)
        )
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

enum Tag<'a> {
    Open(&'a str),
    Close(&'a str),
    Inline(&'a str, &'a str),
}

fn tag_name(s: &str) -> Option<&str> {
    (!s.is_empty() && s.bytes().all(|b| b.is_ascii_uppercase() || b == b'_')).then_some(s)
}

fn classify_line(line: &str) -> Option<Tag<'_>> {
    let t = line.trim();
    let inner = t.strip_prefix('<')?;
    if let Some(rest) = inner.strip_prefix('/') {
        return tag_name(rest.strip_suffix('>')?).map(Tag::Close);
    }
    let (name, rest) = inner.split_once('>')?;
    let name = tag_name(name)?;
    if rest.is_empty() {
        return Some(Tag::Open(name));
    }
    let body = rest.strip_suffix(&format!("</{name}>"))?;
    Some(Tag::Inline(name, body))
}

#[derive(Default)]
struct RawBlock {
    line: usize,
    sections: Vec<(String, String)>,
}

impl RawBlock {
    fn section(&self, tag: &str) -> Option<&str> {
        self.sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, v)| v.as_str())
            .filter(|v| !v.trim().is_empty())
    }
}

/// Parse a cognition document without embedding it.
pub fn parse_document(source_id: &str, text: &str) -> Result<Vec<ParsedCognition>, CognitionError> {
    let err = |line: usize, message: String| CognitionError::Malformed {
        source_id: source_id.to_string(),
        line,
        message,
    };
    let mut blocks: Vec<RawBlock> = Vec::new();
    let mut background: Option<RawBlock> = None;
    // (container tag, block) while inside a top-level block.
    let mut container: Option<(&str, RawBlock)> = None;
    // (section tag, opening line, collected lines) while inside a section.
    let mut section: Option<(String, usize, Vec<&str>)> = None;

    for (idx, line) in text.lines().enumerate() {
        let n = idx + 1;
        let tag = classify_line(line);
        if let Some((name, _, body)) = section.as_mut() {
            match tag {
                Some(Tag::Close(c)) if c == name.as_str() => {
                    let (name, _, body) = section.take().expect("open section");
                    let (_, block) = container.as_mut().expect("section inside block");
                    block.sections.push((name, body.join("\n").trim().to_string()));
                }
                Some(Tag::Open(o)) if o == BLOCK || o == BACKGROUND || BLOCK_SECTIONS.contains(&o) => {
                    return Err(err(n, format!("<{o}> opened inside <{name}>")));
                }
                Some(Tag::Close(c)) if c == BLOCK || c == BACKGROUND || BLOCK_SECTIONS.contains(&c) => {
                    return Err(err(n, format!("</{c}> while <{name}> is still open")));
                }
                _ => body.push(line),
            }
            continue;
        }
        if let Some((kind, _)) = container.as_ref() {
            let kind = *kind;
            match tag {
                Some(Tag::Close(c)) if c == kind => {
                    let (_, block) = container.take().expect("open block");
                    if kind == BLOCK {
                        blocks.push(block);
                    } else {
                        background = Some(block);
                    }
                }
                Some(Tag::Open(o)) if o == BLOCK || o == BACKGROUND => {
                    return Err(err(n, format!("<{o}> opened inside <{kind}>")));
                }
                Some(Tag::Open(o)) => {
                    if kind == BLOCK && !BLOCK_SECTIONS.contains(&o) {
                        return Err(err(n, format!("unknown section <{o}> in <{BLOCK}>")));
                    }
                    section = Some((o.to_string(), n, Vec::new()));
                }
                Some(Tag::Inline(o, body)) => {
                    if kind == BLOCK && !BLOCK_SECTIONS.contains(&o) {
                        return Err(err(n, format!("unknown section <{o}> in <{BLOCK}>")));
                    }
                    let (_, block) = container.as_mut().expect("open block");
                    block.sections.push((o.to_string(), body.trim().to_string()));
                }
                Some(Tag::Close(c)) => {
                    return Err(err(n, format!("unexpected </{c}> inside <{kind}>")));
                }
                None if kind == BLOCK && !line.trim().is_empty() => {
                    return Err(err(n, format!("text outside a section in <{BLOCK}>")));
                }
                None => {}
            }
            continue;
        }
        match tag {
            Some(Tag::Open(o)) if o == BLOCK || o == BACKGROUND => {
                let kind = if o == BLOCK { BLOCK } else { BACKGROUND };
                container = Some((kind, RawBlock { line: n, sections: Vec::new() }));
            }
            Some(Tag::Close(c)) if c == BLOCK || c == BACKGROUND => {
                return Err(err(n, format!("</{c}> without a matching opening tag")));
            }
            _ => {}
        }
    }
    if let Some((name, line, _)) = section {
        return Err(err(line, format!("<{name}> is never closed")));
    }
    if let Some((kind, block)) = container {
        return Err(err(block.line, format!("<{kind}> is never closed")));
    }
    if blocks.is_empty() || blocks.len() > MAX_BLOCKS_PER_DOCUMENT {
        return Err(CognitionError::BlockCount {
            source_id: source_id.to_string(),
            found: blocks.len(),
        });
    }
    let doc_history = background.as_ref().and_then(|b| b.section(HISTORY));
    blocks
        .iter()
        .map(|b| {
            let scenario = b
                .section(TRIGGERS)
                .ok_or_else(|| err(b.line, format!("block lacks a non-empty <{TRIGGERS}>")))?;
            let innovation = b
                .section(INNOVATION)
                .ok_or_else(|| err(b.line, format!("block lacks a non-empty <{INNOVATION}>")))?;
            let algorithm = match b.section(GUIDANCE) {
                Some(g) => format!("{innovation}\n\n{g}"),
                None => innovation.to_string(),
            };
            let historical_context = b
                .section(HISTORY)
                .or(doc_history)
                .or_else(|| b.section(INSIGHT))
                .ok_or_else(|| {
                    err(b.line, format!("block has no <{HISTORY}> and no <{INSIGHT}>"))
                })?;
            Ok(ParsedCognition {
                scenario: scenario.to_string(),
                algorithm,
                historical_context: historical_context.to_string(),
                line: b.line,
            })
        })
        .collect()
}

/// Outcome of ingesting one document.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct IngestOutcome {
    pub added: usize,
    pub skipped_duplicates: usize,
}

/// In-memory cognition base with exact cosine retrieval over scenarios.
#[derive(Debug, Clone)]
pub struct CognitionBase {
    dim: usize,
    entries: Vec<CognitionEntry>,
    scenarios: HashSet<String>,
}

impl CognitionBase {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            scenarios: HashSet::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CognitionEntry] {
        &self.entries
    }

    pub fn get(&self, id: CognitionId) -> Option<&CognitionEntry> {
        let pos = self.entries.binary_search_by_key(&id, |e| e.cognition_id).ok()?;
        Some(&self.entries[pos])
    }

    fn push(&mut self, entry: CognitionEntry) -> Result<(), CognitionError> {
        if entry.scenario_embedding.dim() != self.dim {
            return Err(CognitionError::DimensionMismatch {
                expected: self.dim,
                actual: entry.scenario_embedding.dim(),
            });
        }
        self.scenarios.insert(entry.scenario.trim().to_string());
        self.entries.push(entry);
        Ok(())
    }

    /// Parse, embed and add a document's blocks. Nothing is added when the
    /// document is malformed; blocks whose scenario is already present are skipped.
    pub fn ingest(
        &mut self,
        source_id: &str,
        text: &str,
        embedder: &dyn TextEmbedder,
    ) -> Result<IngestOutcome, CognitionError> {
        let parsed = parse_document(source_id, text)?;
        let mut fresh = Vec::new();
        let mut seen = self.scenarios.clone();
        let mut skipped = 0;
        for p in parsed {
            if !seen.insert(p.scenario.trim().to_string()) {
                skipped += 1;
                continue;
            }
            let v = embedder.embed(&p.scenario)?;
            if v.dim() != self.dim {
                return Err(CognitionError::DimensionMismatch {
                    expected: self.dim,
                    actual: v.dim(),
                });
            }
            fresh.push((p, v));
        }
        let added = fresh.len();
        for (p, v) in fresh {
            let id = self.entries.last().map_or(1, |e| e.cognition_id + 1);
            self.push(CognitionEntry {
                cognition_id: id,
                scenario: p.scenario,
                algorithm: p.algorithm,
                historical_context: p.historical_context,
                source: source_id.to_string(),
                scenario_embedding: v,
            })?;
        }
        Ok(IngestOutcome {
            added,
            skipped_duplicates: skipped,
        })
    }

    /// Ingest every `*.txt` / `*.md` file in `dir`, sorted by file name.
    /// The document identifier is the file stem.
    pub fn ingest_dir(
        &mut self,
        dir: &Path,
        embedder: &dyn TextEmbedder,
    ) -> Result<IngestOutcome, CognitionError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CognitionError::Io { path, source }
        };
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && matches!(p.extension().and_then(|e| e.to_str()), Some("txt" | "md"))
            })
            .collect();
        files.sort();
        let mut total = IngestOutcome::default();
        for path in files {
            let text = fs::read_to_string(&path).map_err(io(&path))?;
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("document")
                .to_string();
            let out = self.ingest(&stem, &text, embedder)?;
            total.added += out.added;
            total.skipped_duplicates += out.skipped_duplicates;
        }
        Ok(total)
    }

    /// Cosine top-k over scenario embeddings; ties by smaller id.
    pub fn retrieve(&self, query: &UnitVector, k: usize) -> Result<Vec<(&CognitionEntry, f64)>, CognitionError> {
        if query.dim() != self.dim {
            return Err(CognitionError::DimensionMismatch {
                expected: self.dim,
                actual: query.dim(),
            });
        }
        let hits = embedding::top_k(
            query,
            self.entries.iter().map(|e| (e.cognition_id, &e.scenario_embedding)),
            k,
        )
        .map_err(EmbedError::from)?;
        Ok(hits
            .into_iter()
            .filter_map(|(id, s)| self.get(id).map(|e| (e, s)))
            .collect())
    }

    /// Embed `query` and retrieve; empty text or an empty base yields nothing.
    pub fn retrieve_text(
        &self,
        query: &str,
        k: usize,
        embedder: &dyn TextEmbedder,
    ) -> Result<Vec<(&CognitionEntry, f64)>, CognitionError> {
        if self.entries.is_empty() || query.trim().is_empty() {
            return Ok(Vec::new());
        }
        let v = embedder.embed(query)?;
        self.retrieve(&v, k)
    }

    /// Write the base as JSON lines.
    pub fn save(&self, path: &Path) -> Result<(), CognitionError> {
        let io = |source| CognitionError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        for e in &self.entries {
            let line = serde_json::to_string(e).map_err(|source| CognitionError::Json {
                path: path.to_path_buf(),
                line: 0,
                source,
            })?;
            writeln!(f, "{line}").map_err(io)?;
        }
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    /// Load a base written by [`CognitionBase::save`]; a missing file is an empty base.
    pub fn load(path: &Path, dim: usize) -> Result<Self, CognitionError> {
        let mut base = Self::new(dim);
        let f = match fs::File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(base),
            Err(source) => {
                return Err(CognitionError::Io {
                    path: path.to_path_buf(),
                    source,
                })
            }
        };
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|source| CognitionError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CognitionEntry =
                serde_json::from_str(&line).map_err(|source| CognitionError::Json {
                    path: path.to_path_buf(),
                    line: i + 1,
                    source,
                })?;
            base.push(entry)?;
        }
        base.entries.sort_by_key(|e| e.cognition_id);
        Ok(base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::HashEmbedder;

    fn block(trigger: &str) -> String {
        format!(
            "<COGNITION>\n<DESIGN_INSIGHT>\n### DESIGN_INSIGHT_HIGH: gate\n</DESIGN_INSIGHT>\n<EXPERIMENTAL_TRIGGER_PATTERNS>\n{trigger}\n</EXPERIMENTAL_TRIGGER_PATTERNS>\n<ALGORITHMIC_INNOVATION>\nmix\n</ALGORITHMIC_INNOVATION>\n</COGNITION>\n"
        )
    }

    #[test]
    fn maps_sections_to_fields() {
        let doc = format!(
            "preamble\n<PAPER_BACKGROUND>\n<TITLE>x</TITLE>\n<HISTORICAL_TECHNICAL_CONTEXT>\nRNNs ruled\n</HISTORICAL_TECHNICAL_CONTEXT>\n</PAPER_BACKGROUND>\n{}",
            block("recall drops")
        );
        let p = parse_document("d", &doc).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].scenario, "recall drops");
        assert_eq!(p[0].algorithm, "mix");
        assert_eq!(p[0].historical_context, "RNNs ruled");
        let p = parse_document("d", &block("a")).unwrap();
        assert_eq!(p[0].historical_context, "### DESIGN_INSIGHT_HIGH: gate");
    }

    #[test]
    fn block_count_limits() {
        let four: String = (0..4).map(|i| block(&format!("t{i}"))).collect();
        assert!(matches!(
            parse_document("d", &four),
            Err(CognitionError::BlockCount { found: 4, .. })
        ));
        assert!(matches!(
            parse_document("d", "nothing here"),
            Err(CognitionError::BlockCount { found: 0, .. })
        ));
    }

    #[test]
    fn diagnostics_carry_line_numbers() {
        let mut doc = block("a");
        doc = doc.replace("</ALGORITHMIC_INNOVATION>\n", "");
        match parse_document("doc", &doc) {
            Err(CognitionError::Malformed { line, .. }) => assert_eq!(line, 10),
            other => panic!("unexpected {other:?}"),
        }
        let e = parse_document("doc", "<COGNITION>\n<WHATEVER>\nx\n</WHATEVER>\n</COGNITION>\n")
            .unwrap_err();
        assert!(e.to_string().starts_with("doc:2:"), "{e}");
    }

    #[test]
    fn ingestion_is_idempotent() {
        let emb = HashEmbedder::new(16);
        let mut base = CognitionBase::new(16);
        let doc = format!("{}{}", block("a"), block("b"));
        assert_eq!(base.ingest("d", &doc, &emb).unwrap().added, 2);
        let again = base.ingest("d", &doc, &emb).unwrap();
        assert_eq!(again.added, 0);
        assert_eq!(again.skipped_duplicates, 2);
        assert_eq!(base.len(), 2);
    }

    #[test]
    fn exact_scenario_ranks_first() {
        let emb = HashEmbedder::new(32);
        let mut base = CognitionBase::new(32);
        base.ingest("d", &format!("{}{}", block("state saturation"), block("local detail")), &emb)
            .unwrap();
        let hits = base.retrieve_text("local detail", 3, &emb).unwrap();
        assert_eq!(hits.len(), 2);
        assert_eq!(hits[0].0.scenario, "local detail");
        assert!((hits[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let emb = HashEmbedder::new(8);
        let mut base = CognitionBase::new(8);
        base.ingest("d", &block("a"), &emb).unwrap();
        let path = dir.path().join("cognitions.jsonl");
        base.save(&path).unwrap();
        let loaded = CognitionBase::load(&path, 8).unwrap();
        assert_eq!(loaded.entries(), base.entries());
        assert!(CognitionBase::load(&path, 9).is_err());
    }
}
