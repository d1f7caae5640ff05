//! Offline reports over a campaign archive: lineage tree export, discovery
//! scaling against compute, and motivation classification.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyst::parent_cognitions;
use crate::cognition::CognitionBase;
use crate::embedding::TextEmbedder;
use crate::gateway::{LlmGateway, Task};
use crate::prompts::{fence, tags, PromptSet, Sections};
use crate::store::{Archive, ArchitectureRecord, RecordId, Stage};

/// Label for records whose classification could not be read.
pub const UNCLASSIFIED: &str = "unclassified";

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("the archive is empty")]
    Empty,
    #[error("unknown tree format {0:?}; expected dot or json")]
    UnknownFormat(String),
    #[error("taxonomy has no categories")]
    EmptyTaxonomy,
    #[error("tree serialization failed: {0}")]
    Json(#[from] serde_json::Error),
}

/// Accepted exploration record that beats the baseline on loss and benchmarks.
pub fn in_gallery(r: &ArchitectureRecord) -> bool {
    r.body.stage == Stage::Exploration && beats_both(r)
}

/// Accepted verification record that beats the verification baseline on both axes.
pub fn is_sota(r: &ArchitectureRecord) -> bool {
    r.body.stage == Stage::Verification && beats_both(r)
}

fn beats_both(r: &ArchitectureRecord) -> bool {
    r.is_accepted()
        && r
            .body
            .fitness
            .as_ref()
            .is_some_and(|f| f.beats_baseline_on_both())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeFormat {
    Dot,
    Json,
}

impl FromStr for TreeFormat {
    type Err = AnalyticsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(Self::Dot),
            "json" => Ok(Self::Json),
            _ => Err(AnalyticsError::UnknownFormat(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: RecordId,
    pub name: String,
    pub fitness: Option<f64>,
    pub status: String,
    pub stage: Stage,
    pub parent: Option<RecordId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEdge {
    pub from: RecordId,
    pub to: RecordId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageTree {
    pub nodes: Vec<TreeNode>,
    pub edges: Vec<TreeEdge>,
    pub roots: Vec<RecordId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeExport {
    pub nodes: usize,
    pub edges: usize,
    pub roots: usize,
    pub text: String,
}

const QUANTILE_COLORS: [&str; 4] = ["#d7e9f7", "#8fc1e8", "#3d8fd1", "#0b4f8a"];
const NO_FITNESS_COLOR: &str = "#e0e0e0";

pub fn lineage_tree(archive: &Archive) -> LineageTree {
    let mut tree = LineageTree {
        nodes: Vec::with_capacity(archive.len()),
        edges: Vec::new(),
        roots: Vec::new(),
    };
    for r in archive.records() {
        let parent = r.body.parent_id.filter(|&p| archive.get(p).is_some());
        match parent {
            Some(p) => tree.edges.push(TreeEdge {
                from: p,
                to: r.record_id,
            }),
            None => tree.roots.push(r.record_id),
        }
        tree.nodes.push(TreeNode {
            id: r.record_id,
            name: r.body.name.clone(),
            fitness: r.composite(),
            status: r.body.status.as_str().to_string(),
            stage: r.body.stage,
            parent,
        });
    }
    tree
}

/// Quartile index of `v` among the sorted fitness values.
fn quartile(sorted: &[f64], v: f64) -> usize {
    let below = sorted.partition_point(|&x| x < v);
    (below * 4 / sorted.len().max(1)).min(3)
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

pub fn to_dot(tree: &LineageTree) -> String {
    let mut sorted: Vec<f64> = tree.nodes.iter().filter_map(|n| n.fitness).collect();
    sorted.sort_by(f64::total_cmp);
    let mut out = String::from("digraph lineage {\n  rankdir=LR;\n  node [shape=box, style=filled];\n");
    for n in &tree.nodes {
        let (label, color) = match n.fitness {
            Some(f) => (
                format!("{} {}\\n{:.4} {}", n.id, escape(&n.name), f, n.status),
                QUANTILE_COLORS[quartile(&sorted, f)],
            ),
            None => (format!("{} {}\\n{}", n.id, escape(&n.name), n.status), NO_FITNESS_COLOR),
        };
        let _ = writeln!(out, "  n{} [label=\"{label}\", fillcolor=\"{color}\"];", n.id);
    }
    for e in &tree.edges {
        let _ = writeln!(out, "  n{} -> n{};", e.from, e.to);
    }
    out.push_str("}\n");
    out
}

pub fn export_tree(archive: &Archive, format: TreeFormat) -> Result<TreeExport, AnalyticsError> {
    if archive.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let tree = lineage_tree(archive);
    let text = match format {
        TreeFormat::Dot => to_dot(&tree),
        TreeFormat::Json => serde_json::to_string_pretty(&tree)?,
    };
    Ok(TreeExport {
        nodes: tree.nodes.len(),
        edges: tree.edges.len(),
        roots: tree.roots.len(),
        text,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub record_id: RecordId,
    pub cumulative_hours: f64,
    pub gallery_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub stage: Stage,
    /// One point per gallery record, in id order.
    pub points: Vec<ScalingPoint>,
    pub total_hours: f64,
    /// Gallery records per compute hour; `None` with fewer than two points.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

impl ScalingReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("record_id\tcumulative_hours\tgallery_count\n");
        for p in &self.points {
            let _ = writeln!(out, "{}\t{:.6}\t{}", p.record_id, p.cumulative_hours, p.gallery_count);
        }
        match self.slope {
            Some(s) => {
                let _ = writeln!(out, "# slope {s:.9} per hour");
            }
            None => out.push_str("# slope undefined: fewer than two gallery points\n"),
        }
        out
    }
}

/// Ordinary least squares `y = a + b x`; `None` when `x` has no spread.
pub fn least_squares(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let b = sxy / sxx;
    Some((my - b * mx, b))
}

/// Cumulative gallery count against cumulative compute for one stage.
///
/// Records are ordered by id, so input order does not matter. Exploration
/// uses the gallery rule, verification the SOTA rule.
pub fn report_scaling(records: &[Arc<ArchitectureRecord>], stage: Stage) -> ScalingReport {
    let mut sorted: Vec<&ArchitectureRecord> = records
        .iter()
        .map(Arc::as_ref)
        .filter(|r| r.body.stage == stage)
        .collect();
    sorted.sort_by_key(|r| r.record_id);
    let member = match stage {
        Stage::Exploration => in_gallery,
        Stage::Verification => is_sota,
    };
    let mut hours = 0.0;
    let mut count = 0;
    let mut points = Vec::new();
    for r in sorted {
        hours += r.body.wall_seconds / 3600.0;
        if member(r) {
            count += 1;
            points.push(ScalingPoint {
                record_id: r.record_id,
                cumulative_hours: hours,
                gallery_count: count,
            });
        }
    }
    let xy: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (p.cumulative_hours, p.gallery_count as f64))
        .collect();
    let fit = least_squares(&xy);
    ScalingReport {
        stage,
        points,
        total_hours: hours,
        slope: fit.map(|f| f.1),
        intercept: fit.map(|f| f.0),
    }
}

/// Component categories a motivation may be labeled with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    categories: Vec<String>,
}

impl Taxonomy {
    pub fn builtin() -> Self {
        Self::parse(include_str!("../assets/taxonomy.txt")).expect("bundled taxonomy")
    }

    /// One category per non-blank line; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, AnalyticsError> {
        let categories: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        if categories.is_empty() {
            return Err(AnalyticsError::EmptyTaxonomy);
        }
        Ok(Self { categories })
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    fn canonical(&self, label: &str) -> Option<&str> {
        let label = label.trim().trim_matches(|c: char| c == '"' || c == '\'' || c == '.');
        self.categories
            .iter()
            .find(|c| c.eq_ignore_ascii_case(label))
            .map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Cognition,
    Analysis,
    Original,
    Unclassified,
}

impl Provenance {
    pub const ALL: [Provenance; 4] = [
        Provenance::Cognition,
        Provenance::Analysis,
        Provenance::Original,
        Provenance::Unclassified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Cognition => "cognition",
            Provenance::Analysis => "analysis",
            Provenance::Original => "original",
            Provenance::Unclassified => UNCLASSIFIED,
        }
    }

    fn parse(s: &str) -> Self {
        let word = s
            .split_whitespace()
            .next()
            .unwrap_or("")
            .trim_matches(|c: char| !c.is_ascii_alphabetic())
            .to_ascii_lowercase();
        match word.as_str() {
            "cognition" => Provenance::Cognition,
            "analysis" => Provenance::Analysis,
            "original" => Provenance::Original,
            _ => Provenance::Unclassified,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub record_id: RecordId,
    pub gallery: bool,
    /// Taxonomy categories, or just [`UNCLASSIFIED`].
    pub components: Vec<String>,
    pub provenance: Provenance,
}

/// Parse a classifier reply into (components, provenance).
pub fn parse_classification(taxonomy: &Taxonomy, reply: &str) -> (Vec<String>, Provenance) {
    let Ok(sections) = Sections::parse(reply) else {
        return (vec![UNCLASSIFIED.to_string()], Provenance::Unclassified);
    };
    let mut components: Vec<String> = Vec::new();
    for label in sections.first("COMPONENTS").unwrap_or("").split([',', '\n']) {
        if let Some(c) = taxonomy.canonical(label) {
            if !components.iter().any(|x| x == c) {
                components.push(c.to_string());
            }
        }
    }
    if components.is_empty() {
        components.push(UNCLASSIFIED.to_string());
    }
    let provenance = sections
        .first("PROVENANCE")
        .map(Provenance::parse)
        .unwrap_or(Provenance::Unclassified);
    (components, provenance)
}

/// Label each record with component categories and where its idea came from.
///
/// The classifier sees what the proposer saw: the parent's analysis and the
/// cognition notes linked to the parent. Gateway failures and unreadable
/// replies land in the unclassified bucket.
pub fn classify_motivations(
    gateway: &LlmGateway,
    prompts: &PromptSet,
    taxonomy: &Taxonomy,
    archive: &Archive,
    cognitions: &CognitionBase,
    embedder: &dyn TextEmbedder,
    records: &[Arc<ArchitectureRecord>],
) -> Vec<Classification> {
    let taxonomy_block = fence(tags::TAXONOMY, &taxonomy.categories.join("\n"));
    records
        .iter()
        .map(|r| {
            let parent = r.body.parent_id.and_then(|p| archive.get(p));
            let notes: Vec<String> = parent
                .map(|p| parent_cognitions(cognitions, p, embedder))
                .unwrap_or_default()
                .iter()
                .map(|c| fence(tags::COGNITION_NOTE, &c.note()))
                .collect();
            let analysis = parent
                .and_then(|p| p.body.analysis.as_deref())
                .map(|a| fence(tags::PARENT_ANALYSIS, a))
                .unwrap_or_default();
            let reply = prompts
                .render(
                    Task::Classify,
                    &[
                        ("motivation", r.body.motivation.trim()),
                        ("cognitions", &notes.join("\n")),
                        ("analysis", &analysis),
                        ("taxonomy", &taxonomy_block),
                    ],
                )
                .map_err(|e| e.to_string())
                .and_then(|m| gateway.chat(Task::Classify, &m).map_err(|e| e.to_string()));
            let (components, provenance) = match reply {
                Ok(text) => parse_classification(taxonomy, &text),
                Err(e) => {
                    tracing::warn!(record_id = r.record_id, "classification failed: {e}");
                    (vec![UNCLASSIFIED.to_string()], Provenance::Unclassified)
                }
            };
            Classification {
                record_id: r.record_id,
                gallery: in_gallery(r),
                components,
                provenance,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRow {
    pub group: String,
    pub total: usize,
    pub counts: BTreeMap<Provenance, usize>,
}

impl ProvenanceRow {
    fn new(group: &str) -> Self {
        Self {
            group: group.to_string(),
            total: 0,
            counts: Provenance::ALL.iter().map(|&p| (p, 0)).collect(),
        }
    }

    /// Share of the group, in percent.
    pub fn percent(&self, p: Provenance) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        100.0 * self.counts.get(&p).copied().unwrap_or(0) as f64 / self.total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceTable {
    pub gallery: ProvenanceRow,
    pub non_gallery: ProvenanceRow,
    pub all: ProvenanceRow,
}

impl ProvenanceTable {
    pub fn rows(&self) -> [&ProvenanceRow; 3] {
        [&self.gallery, &self.non_gallery, &self.all]
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("group\ttotal");
        for p in Provenance::ALL {
            let _ = write!(out, "\t{}_pct", p.as_str());
        }
        out.push('\n');
        for row in self.rows() {
            let _ = write!(out, "{}\t{}", row.group, row.total);
            for p in Provenance::ALL {
                let _ = write!(out, "\t{:.1}", row.percent(p));
            }
            out.push('\n');
        }
        out
    }
}

pub fn provenance_table(labels: &[Classification]) -> ProvenanceTable {
    let mut t = ProvenanceTable {
        gallery: ProvenanceRow::new("gallery"),
        non_gallery: ProvenanceRow::new("non_gallery"),
        all: ProvenanceRow::new("all"),
    };
    for c in labels {
        let group = if c.gallery { &mut t.gallery } else { &mut t.non_gallery };
        for row in [group, &mut t.all] {
            row.total += 1;
            *row.counts.entry(c.provenance).or_default() += 1;
        }
    }
    t
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentRow {
    pub records: usize,
    /// Label assignments per category.
    pub counts: BTreeMap<String, usize>,
}

impl ComponentRow {
    pub fn assignments(&self) -> usize {
        self.counts.values().sum()
    }

    /// Share of all label assignments in the group.
    pub fn mass(&self, category: &str) -> f64 {
        let total = self.assignments();
        if total == 0 {
            return 0.0;
        }
        self.counts.get(category).copied().unwrap_or(0) as f64 / total as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComponentHistogram {
    pub gallery: ComponentRow,
    pub non_gallery: ComponentRow,
    pub all: ComponentRow,
}

impl ComponentHistogram {
    /// Categories by descending share of all assignments.
    pub fn to_tsv(&self) -> String {
        let mut cats: Vec<(&String, &usize)> = self.all.counts.iter().collect();
        cats.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
        let mut out = String::from("category\tgallery_pct\tnon_gallery_pct\tall_pct\n");
        for (c, _) in cats {
            let _ = writeln!(
                out,
                "{c}\t{:.1}\t{:.1}\t{:.1}",
                100.0 * self.gallery.mass(c),
                100.0 * self.non_gallery.mass(c),
                100.0 * self.all.mass(c)
            );
        }
        out
    }
}

pub fn component_histogram(labels: &[Classification]) -> ComponentHistogram {
    let mut h = ComponentHistogram::default();
    for c in labels {
        let group = if c.gallery { &mut h.gallery } else { &mut h.non_gallery };
        for row in [group, &mut h.all] {
            row.records += 1;
            for comp in &c.components {
                *row.counts.entry(comp.clone()).or_default() += 1;
            }
        }
    }
    h
}
