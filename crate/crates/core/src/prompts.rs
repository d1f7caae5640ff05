//! Prompt templates and the fenced-section reply format.
//!
//! Templates are text assets, one per [`Task`], with a `[system]` part and a
//! `[user]` part. `{{slot}}` placeholders are filled at render time; each task
//! has a fixed slot vocabulary, checked when templates are loaded.
//!
//! Replies (and structured slot contents) use fenced sections:
//!
//! ```text
//! [[TAG]]
//! content lines, kept verbatim
//! [[/TAG]]
//! ```
//!
//! A marker is a line whose trimmed text is `[[TAG]]` or `[[/TAG]]`, where
//! `TAG` is ASCII letters, digits and `_` (matched case-insensitively). The
//! one-line form `[[TAG]] content [[/TAG]]` is also accepted. Sections do not
//! nest: once `TAG` is open, every line up to the matching close is content.
//! Text outside sections is ignored, as are stray closing markers. A section
//! left open at end of input is an error. If a section's content is wrapped in
//! a markdown code fence, the fence lines are dropped.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::gateway::{Message, Task};

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template for {task} is malformed: {reason}")]
    Malformed { task: &'static str, reason: String },
    #[error("template for {task} uses unknown slot {{{{{slot}}}}}")]
    UnknownSlot { task: &'static str, slot: String },
    #[error("no value supplied for slot {{{{{slot}}}}} of {task}")]
    MissingSlot { task: &'static str, slot: String },
    #[error("cannot read template {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SectionError {
    #[error("section [[{tag}]] opened on line {line} is never closed")]
    Unclosed { tag: String, line: usize },
}

/// Section tags used inside rendered slot values.
pub mod tags {
    pub const RECORD: &str = "RECORD";
    pub const PARENT: &str = "PARENT";
    pub const PARENT_MOTIVATION: &str = "PARENT_MOTIVATION";
    pub const PARENT_CODE: &str = "PARENT_CODE";
    pub const REFERENCE: &str = "REFERENCE";
    pub const COGNITION_NOTE: &str = "COGNITION_NOTE";
    pub const FEEDBACK_ITEM: &str = "FEEDBACK_ITEM";
    pub const BASELINE: &str = "BASELINE";
    pub const CANDIDATE: &str = "CANDIDATE";
    pub const NEIGHBOR: &str = "NEIGHBOR";
    pub const SOURCE: &str = "SOURCE";
    pub const ERROR_LOG: &str = "ERROR_LOG";
    pub const METRICS: &str = "METRICS";
    pub const SIBLING: &str = "SIBLING";
    pub const PARENT_ANALYSIS: &str = "PARENT_ANALYSIS";
    pub const TAXONOMY: &str = "TAXONOMY";
}

/// Slots each task's template may use.
pub fn slots_for(task: Task) -> &'static [&'static str] {
    match task {
        Task::Summarize => &["record"],
        Task::Propose => &["parent", "references", "cognitions", "baseline", "feedback"],
        Task::NoveltyJudge => &["candidate", "neighbors"],
        Task::SanityCheck => &["code"],
        Task::Debug => &["motivation", "code", "error_log"],
        Task::QualityJudge => &["name", "motivation", "code", "metrics", "baselines"],
        Task::Analyze => &["record", "baselines", "parent", "siblings"],
        Task::Classify => &["motivation", "cognitions", "analysis", "taxonomy"],
    }
}

fn default_source(task: Task) -> &'static str {
    match task {
        Task::Summarize => include_str!("../assets/prompts/summarize.txt"),
        Task::Propose => include_str!("../assets/prompts/propose.txt"),
        Task::NoveltyJudge => include_str!("../assets/prompts/novelty_judge.txt"),
        Task::SanityCheck => include_str!("../assets/prompts/sanity_check.txt"),
        Task::Debug => include_str!("../assets/prompts/debug.txt"),
        Task::QualityJudge => include_str!("../assets/prompts/quality_judge.txt"),
        Task::Analyze => include_str!("../assets/prompts/analyze.txt"),
        Task::Classify => include_str!("../assets/prompts/classify.txt"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    task: Task,
    system: String,
    user: String,
}

impl Template {
    pub fn parse(task: Task, source: &str) -> Result<Self, PromptError> {
        let malformed = |reason: &str| PromptError::Malformed {
            task: task.as_str(),
            reason: reason.to_string(),
        };
        let mut system: Option<Vec<&str>> = None;
        let mut user: Option<Vec<&str>> = None;
        let mut current: Option<&mut Vec<&str>> = None;
        for line in source.lines() {
            match line.trim() {
                "[system]" => {
                    if system.is_some() {
                        return Err(malformed("duplicate [system] header"));
                    }
                    current = Some(system.insert(Vec::new()));
                }
                "[user]" => {
                    if user.is_some() {
                        return Err(malformed("duplicate [user] header"));
                    }
                    current = Some(user.insert(Vec::new()));
                }
                _ => match current.as_deref_mut() {
                    Some(buf) => buf.push(line),
                    None if line.trim().is_empty() => {}
                    None => return Err(malformed("text before the first header")),
                },
            }
        }
        let system = system.ok_or_else(|| malformed("missing [system] header"))?;
        let user = user.ok_or_else(|| malformed("missing [user] header"))?;
        let t = Self {
            task,
            system: system.join("\n").trim().to_string(),
            user: user.join("\n").trim().to_string(),
        };
        for slot in placeholders(&t.system).chain(placeholders(&t.user)) {
            if !slots_for(task).contains(&slot) {
                return Err(PromptError::UnknownSlot {
                    task: task.as_str(),
                    slot: slot.to_string(),
                });
            }
        }
        Ok(t)
    }

    pub fn task(&self) -> Task {
        self.task
    }

    /// Fill every placeholder. Values are inserted as-is; they are not
    /// rescanned for placeholders.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<Vec<Message>, PromptError> {
        Ok(vec![
            Message::system(self.fill(&self.system, values)?),
            Message::user(self.fill(&self.user, values)?),
        ])
    }

    fn fill(&self, text: &str, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(text.len());
        let mut rest = text;
        while let Some(start) = rest.find("{{") {
            let Some(len) = rest[start + 2..].find("}}") else {
                break;
            };
            let name = &rest[start + 2..start + 2 + len];
            if !is_slot_name(name) {
                out.push_str(&rest[..start + 2]);
                rest = &rest[start + 2..];
                continue;
            }
            let value = values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| *v)
                .ok_or_else(|| PromptError::MissingSlot {
                    task: self.task.as_str(),
                    slot: name.to_string(),
                })?;
            out.push_str(&rest[..start]);
            out.push_str(value);
            rest = &rest[start + 2 + len + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
}

fn placeholders(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || loop {
        let start = rest.find("{{")?;
        let len = rest[start + 2..].find("}}")?;
        let name = &rest[start + 2..start + 2 + len];
        rest = &rest[start + 2..];
        if is_slot_name(name) {
            return Some(name);
        }
    })
}

/// The full template set.
#[derive(Debug, Clone)]
pub struct PromptSet {
    templates: BTreeMap<Task, Template>,
}

impl PromptSet {
    /// The templates compiled into the crate.
    pub fn builtin() -> Self {
        let templates = Task::ALL
            .iter()
            .map(|&t| {
                let tpl = Template::parse(t, default_source(t)).expect("builtin template is valid");
                (t, tpl)
            })
            .collect();
        Self { templates }
    }

    /// Builtin templates, with any `<task>.txt` found in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for task in Task::ALL {
            let path = dir.join(format!("{}.txt", task.as_str()));
            if !path.exists() {
                continue;
            }
            let source = fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            set.templates.insert(task, Template::parse(task, &source)?);
        }
        Ok(set)
    }

    pub fn get(&self, task: Task) -> &Template {
        &self.templates[&task]
    }

    pub fn render(&self, task: Task, values: &[(&str, &str)]) -> Result<Vec<Message>, PromptError> {
        self.get(task).render(values)
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// One parsed section.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub tag: String,
    pub content: String,
    /// 1-based line of the opening marker.
    pub line: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sections(Vec<Section>);

impl Sections {
    pub fn parse(text: &str) -> Result<Self, SectionError> {
        let mut out = Vec::new();
        let mut open: Option<(String, usize, Vec<&str>)> = None;
        for (idx, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if let Some((tag, start, buf)) = open.as_mut() {
                if closing_tag(trimmed).is_some_and(|t| t.eq_ignore_ascii_case(tag)) {
                    out.push(Section {
                        tag: std::mem::take(tag),
                        content: clean_content(buf),
                        line: *start,
                    });
                    open = None;
                } else {
                    buf.push(line);
                }
                continue;
            }
            if let Some((tag, inline)) = inline_section(trimmed) {
                out.push(Section {
                    tag,
                    content: inline.trim().to_string(),
                    line: idx + 1,
                });
            } else if let Some(tag) = opening_tag(trimmed) {
                open = Some((tag.to_ascii_uppercase(), idx + 1, Vec::new()));
            }
        }
        if let Some((tag, line, _)) = open {
            return Err(SectionError::Unclosed { tag, line });
        }
        Ok(Self(out))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Section> {
        self.0.iter()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn first(&self, tag: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|s| s.tag.eq_ignore_ascii_case(tag))
            .map(|s| s.content.as_str())
    }

    pub fn all<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.0
            .iter()
            .filter(move |s| s.tag.eq_ignore_ascii_case(tag))
            .map(|s| s.content.as_str())
    }

    /// Index of the first section with `tag`.
    pub fn position(&self, tag: &str) -> Option<usize> {
        self.0.iter().position(|s| s.tag.eq_ignore_ascii_case(tag))
    }
}

fn is_tag(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

fn opening_tag(line: &str) -> Option<&str> {
    let inner = line.strip_prefix("[[")?.strip_suffix("]]")?;
    is_tag(inner).then_some(inner)
}

fn closing_tag(line: &str) -> Option<&str> {
    let inner = line.strip_prefix("[[/")?.strip_suffix("]]")?;
    is_tag(inner).then_some(inner)
}

fn inline_section(line: &str) -> Option<(String, &str)> {
    let rest = line.strip_prefix("[[")?;
    let end = rest.find("]]")?;
    let tag = &rest[..end];
    if !is_tag(tag) {
        return None;
    }
    let body = &rest[end + 2..];
    let close = format!("[[/{tag}]]");
    let body = if body.len() >= close.len()
        && body[body.len() - close.len()..].eq_ignore_ascii_case(&close)
    {
        &body[..body.len() - close.len()]
    } else {
        return None;
    };
    Some((tag.to_ascii_uppercase(), body))
}

fn clean_content(lines: &[&str]) -> String {
    let mut start = 0;
    let mut end = lines.len();
    while start < end && lines[start].trim().is_empty() {
        start += 1;
    }
    while end > start && lines[end - 1].trim().is_empty() {
        end -= 1;
    }
    let body = &lines[start..end];
    let body = if body.len() >= 2
        && body[0].trim_start().starts_with("```")
        && body[body.len() - 1].trim() == "```"
    {
        &body[1..body.len() - 1]
    } else {
        body
    };
    body.join("\n")
}

/// Wrap `content` as one section, in the form [`Sections::parse`] reads.
pub fn fence(tag: &str, content: &str) -> String {
    format!("[[{tag}]]\n{}\n[[/{tag}]]", content.trim_end_matches('\n'))
}
