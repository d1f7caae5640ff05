//! Append-only experiment archive.
//!
//! On disk a campaign directory holds:
//!
//! - `campaign.json`: the [`CampaignHeader`] (embedding dimension, benchmark
//!   task set, baseline record ids, config hash).
//! - `records.jsonl`: one [`ArchitectureRecord`] per line, each a JSON object
//!   carrying `"schema_version": 1`. Lines are only ever appended.
//! - `embeddings.jsonl`: cached motivation vectors keyed by record id. This is
//!   a cache; missing entries are recomputed when the store is opened.
//!
//! Appends are serialised by a single writer lock. Readers either query the
//! live archive under a read lock or take an immutable [`Archive`] snapshot.

mod archive;
mod record;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::{Archive, IndexedMotivation, Lineage};
pub use record::{
    ArchitectureRecord, CognitionId, MetricsReport, RecordDraft, RecordId, RecordStatus, Revision,
    Stage,
};

use crate::embedding::{EmbedError, EmbeddingError, TextEmbedder, UnitVector};

pub const SCHEMA_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "campaign.json";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("parent record {parent} does not exist (store has {len} records)")]
    DanglingParent { parent: RecordId, len: usize },
    #[error("record {0} not found")]
    NotFound(RecordId),
    #[error("embedding dimension {actual} does not match campaign dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
    #[error("corrupt record log at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<EmbeddingError> for StoreError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::DimensionMismatch { expected, actual } => {
                StoreError::DimensionMismatch { expected, actual }
            }
            other => StoreError::Embed(EmbedError::Vector(other)),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Per-campaign metadata written next to the record log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignHeader {
    pub schema_version: u32,
    pub embedding_dim: usize,
    /// Benchmark tasks every complete metrics report must cover.
    pub task_set: Vec<String>,
    #[serde(default)]
    pub baselines: BTreeMap<Stage, RecordId>,
    #[serde(default)]
    pub config_hash: String,
    /// Index motivations of non-accepted records too (flagged by status).
    #[serde(default = "default_true")]
    pub index_rejected_motivations: bool,
}

fn default_true() -> bool {
    true
}

impl CampaignHeader {
    pub fn new(embedding_dim: usize, task_set: Vec<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            embedding_dim,
            task_set,
            baselines: BTreeMap::new(),
            config_hash: String::new(),
            index_rejected_motivations: true,
        }
    }
}

#[derive(Serialize)]
struct LogLineRef<'a> {
    schema_version: u32,
    #[serde(flatten)]
    record: &'a ArchitectureRecord,
}

#[derive(Deserialize)]
struct LogLine {
    schema_version: u32,
    #[serde(flatten)]
    record: ArchitectureRecord,
}

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    record_id: RecordId,
    vector: UnitVector,
}

/// Serialise one record exactly as it appears in `records.jsonl` (no newline).
pub fn encode_record_line(record: &ArchitectureRecord) -> Result<String, StoreError> {
    Ok(serde_json::to_string(&LogLineRef {
        schema_version: SCHEMA_VERSION,
        record,
    })?)
}

/// Parse one `records.jsonl` line.
pub fn decode_record_line(line: &str) -> Result<ArchitectureRecord, StoreError> {
    let parsed: LogLine = serde_json::from_str(line)?;
    if parsed.schema_version != SCHEMA_VERSION {
        return Err(StoreError::SchemaVersion(parsed.schema_version));
    }
    Ok(parsed.record)
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    /// `fsync` the log after every append.
    pub sync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        Self { sync: true }
    }
}

struct Persistence {
    dir: PathBuf,
    records: File,
    embeddings: File,
    sync: bool,
}

pub struct RecordStore {
    header: RwLock<CampaignHeader>,
    archive: RwLock<Archive>,
    persistence: Option<Mutex<Persistence>>,
    embedder: Arc<dyn TextEmbedder>,
}

impl std::fmt::Debug for RecordStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecordStore")
            .field("len", &self.len())
            .field("dir", &self.dir())
            .finish()
    }
}

impl RecordStore {
    /// A store with no backing files.
    pub fn in_memory(
        header: CampaignHeader,
        embedder: Arc<dyn TextEmbedder>,
    ) -> Result<Self, StoreError> {
        check_dim(&header, embedder.as_ref())?;
        Ok(Self {
            header: RwLock::new(header),
            archive: RwLock::new(Archive::default()),
            persistence: None,
            embedder,
        })
    }

    /// Create a fresh campaign directory. Fails if a record log already exists.
    pub fn create(
        dir: impl AsRef<Path>,
        header: CampaignHeader,
        embedder: Arc<dyn TextEmbedder>,
        options: StoreOptions,
    ) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        check_dim(&header, embedder.as_ref())?;
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let records_path = dir.join(RECORDS_FILE);
        if records_path.exists() {
            return Err(StoreError::Validation(format!(
                "{} already exists; open it instead",
                records_path.display()
            )));
        }
        write_header(dir, &header)?;
        let store = Self {
            header: RwLock::new(header),
            archive: RwLock::new(Archive::default()),
            persistence: Some(Mutex::new(open_files(dir, options)?)),
            embedder,
        };
        Ok(store)
    }

    /// Open an existing campaign directory, rebuilding every derived index.
    pub fn open(
        dir: impl AsRef<Path>,
        embedder: Arc<dyn TextEmbedder>,
        options: StoreOptions,
    ) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        let header_path = dir.join(HEADER_FILE);
        let header: CampaignHeader = serde_json::from_slice(
            &fs::read(&header_path).map_err(io_err(&header_path))?,
        )?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(StoreError::SchemaVersion(header.schema_version));
        }
        check_dim(&header, embedder.as_ref())?;

        let cached = read_embedding_cache(dir, header.embedding_dim)?;
        let records = read_record_log(dir)?;

        let mut archive = Archive::default();
        let mut fresh = Vec::new();
        for (line_no, rec) in records.into_iter().enumerate() {
            let line = line_no + 1;
            let corrupt = |reason: String| StoreError::Corrupt { line, reason };
            if rec.record_id != archive.next_id() || rec.created_seq != rec.record_id {
                return Err(corrupt(format!(
                    "expected record_id {} but found {}",
                    archive.next_id(),
                    rec.record_id
                )));
            }
            rec.body
                .validate(&header.task_set)
                .map_err(|e| corrupt(e.to_string()))?;
            if let Some(p) = rec.body.parent_id {
                if archive.get(p).is_none() {
                    return Err(corrupt(format!("dangling parent {p}")));
                }
            }
            let vector = if should_index(&header, &rec.body) {
                match cached.get(&rec.record_id) {
                    Some(v) => Some(v.clone()),
                    None => {
                        let v = embedder.embed(&rec.body.motivation)?;
                        fresh.push((rec.record_id, v.clone()));
                        Some(v)
                    }
                }
            } else {
                None
            };
            archive.push(rec, vector);
        }

        let mut persistence = open_files(dir, options)?;
        for (record_id, vector) in fresh {
            write_line(
                &mut persistence.embeddings,
                &serde_json::to_string(&EmbeddingLine { record_id, vector })?,
                false,
                &dir.join(EMBEDDINGS_FILE),
            )?;
        }
        Ok(Self {
            header: RwLock::new(header),
            archive: RwLock::new(archive),
            persistence: Some(Mutex::new(persistence)),
            embedder,
        })
    }

    pub fn dir(&self) -> Option<PathBuf> {
        self.persistence
            .as_ref()
            .map(|p| p.lock().expect("persistence lock").dir.clone())
    }

    pub fn header(&self) -> CampaignHeader {
        self.header.read().expect("header lock").clone()
    }

    pub fn embedder(&self) -> &Arc<dyn TextEmbedder> {
        &self.embedder
    }

    /// Record `id` as the baseline for `stage` and rewrite the header.
    pub fn set_baseline(&self, stage: Stage, id: RecordId) -> Result<(), StoreError> {
        self.require_exists(id)?;
        let mut header = self.header.write().expect("header lock");
        header.baselines.insert(stage, id);
        if let Some(p) = &self.persistence {
            let dir = p.lock().expect("persistence lock").dir.clone();
            write_header(&dir, &header)?;
        }
        Ok(())
    }

    pub fn set_config_hash(&self, hash: impl Into<String>) -> Result<(), StoreError> {
        let mut header = self.header.write().expect("header lock");
        header.config_hash = hash.into();
        if let Some(p) = &self.persistence {
            let dir = p.lock().expect("persistence lock").dir.clone();
            write_header(&dir, &header)?;
        }
        Ok(())
    }

    pub fn baseline(&self, stage: Stage) -> Option<Arc<ArchitectureRecord>> {
        let id = *self.header.read().expect("header lock").baselines.get(&stage)?;
        self.get(id)
    }

    /// Persist a new record and return its id.
    ///
    /// Validation, the parent check and embedding all happen before anything
    /// is written, so a failed append leaves no trace.
    pub fn append_record(&self, draft: RecordDraft) -> Result<RecordId, StoreError> {
        let header = self.header();
        draft.validate(&header.task_set)?;
        let vector = if should_index(&header, &draft) {
            let v = self.embedder.embed(&draft.motivation)?;
            if v.dim() != header.embedding_dim {
                return Err(StoreError::DimensionMismatch {
                    expected: header.embedding_dim,
                    actual: v.dim(),
                });
            }
            Some(v)
        } else {
            None
        };

        let mut archive = self.archive.write().expect("archive lock");
        if let Some(parent) = draft.parent_id {
            if archive.get(parent).is_none() {
                return Err(StoreError::DanglingParent {
                    parent,
                    len: archive.len(),
                });
            }
        }
        let record_id = archive.next_id();
        let record = ArchitectureRecord {
            record_id,
            created_seq: record_id,
            body: draft,
        };
        if let Some(p) = &self.persistence {
            let mut p = p.lock().expect("persistence lock");
            let records_path = p.dir.join(RECORDS_FILE);
            let sync = p.sync;
            write_line(&mut p.records, &encode_record_line(&record)?, sync, &records_path)?;
            if let Some(v) = &vector {
                let emb_path = p.dir.join(EMBEDDINGS_FILE);
                let line = serde_json::to_string(&EmbeddingLine {
                    record_id,
                    vector: v.clone(),
                })?;
                write_line(&mut p.embeddings, &line, false, &emb_path)?;
            }
        }
        archive.push(record, vector);
        Ok(record_id)
    }

    /// Immutable point-in-time view.
    pub fn snapshot(&self) -> Arc<Archive> {
        Arc::new(self.archive.read().expect("archive lock").clone())
    }

    /// Run a read-only query against the live archive.
    pub fn read<T>(&self, f: impl FnOnce(&Archive) -> T) -> T {
        f(&self.archive.read().expect("archive lock"))
    }

    pub fn len(&self) -> usize {
        self.read(Archive::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn accepted_count(&self) -> usize {
        self.read(Archive::accepted_count)
    }

    pub fn get(&self, id: RecordId) -> Option<Arc<ArchitectureRecord>> {
        self.read(|a| a.get(id).cloned())
    }

    fn require_exists(&self, id: RecordId) -> Result<(), StoreError> {
        self.read(|a| a.require(id).map(|_| ()))
    }

    pub fn nearest_motivations(
        &self,
        query: &UnitVector,
        k: usize,
    ) -> Result<Vec<(RecordId, f64)>, StoreError> {
        self.read(|a| a.nearest_motivations(query, k))
    }

    pub fn lineage(&self, id: RecordId) -> Result<Lineage, StoreError> {
        self.read(|a| a.lineage(id))
    }

    pub fn top_by_fitness(&self, n: usize) -> Vec<Arc<ArchitectureRecord>> {
        self.read(|a| a.top_by_fitness(n))
    }

    /// The full record log as it is (or would be) written to `records.jsonl`.
    pub fn dump_jsonl(&self) -> Result<String, StoreError> {
        self.read(|a| {
            let mut out = String::new();
            for r in a.records() {
                out.push_str(&encode_record_line(r)?);
                out.push('\n');
            }
            Ok(out)
        })
    }
}

fn check_dim(header: &CampaignHeader, embedder: &dyn TextEmbedder) -> Result<(), StoreError> {
    if header.embedding_dim != embedder.dim() {
        return Err(StoreError::DimensionMismatch {
            expected: header.embedding_dim,
            actual: embedder.dim(),
        });
    }
    Ok(())
}

fn should_index(header: &CampaignHeader, draft: &RecordDraft) -> bool {
    !draft.motivation.trim().is_empty()
        && (draft.status == RecordStatus::Accepted || header.index_rejected_motivations)
}

fn write_header(dir: &Path, header: &CampaignHeader) -> Result<(), StoreError> {
    let path = dir.join(HEADER_FILE);
    let tmp = dir.join(format!("{HEADER_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_vec_pretty(header)?).map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))
}

fn open_files(dir: &Path, options: StoreOptions) -> Result<Persistence, StoreError> {
    let open = |name: &str| {
        let path = dir.join(name);
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))
    };
    Ok(Persistence {
        dir: dir.to_path_buf(),
        records: open(RECORDS_FILE)?,
        embeddings: open(EMBEDDINGS_FILE)?,
        sync: options.sync,
    })
}

fn write_line(file: &mut File, line: &str, sync: bool, path: &Path) -> Result<(), StoreError> {
    let mut buf = Vec::with_capacity(line.len() + 1);
    buf.extend_from_slice(line.as_bytes());
    buf.push(b'\n');
    file.write_all(&buf).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))?;
    if sync {
        file.sync_data().map_err(io_err(path))?;
    }
    Ok(())
}

/// Parse the record log. A torn final line (no trailing newline, unparseable)
/// is treated as an interrupted append and truncated away.
fn read_record_log(dir: &Path) -> Result<Vec<ArchitectureRecord>, StoreError> {
    let path = dir.join(RECORDS_FILE);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let text = String::from_utf8_lossy(&bytes);
    let ends_clean = text.is_empty() || text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    let mut valid_bytes = 0usize;
    for (i, line) in lines.iter().enumerate() {
        let last = i + 1 == lines.len();
        match decode_record_line(line) {
            Ok(r) => {
                out.push(r);
                valid_bytes += line.len() + 1;
            }
            Err(e) if last && !ends_clean => {
                tracing::warn!(line = i + 1, error = %e, "truncating torn final record");
                let f = OpenOptions::new().write(true).open(&path).map_err(io_err(&path))?;
                f.set_len(valid_bytes as u64).map_err(io_err(&path))?;
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    line: i + 1,
                    reason: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

fn read_embedding_cache(
    dir: &Path,
    dim: usize,
) -> Result<HashMap<RecordId, UnitVector>, StoreError> {
    let path = dir.join(EMBEDDINGS_FILE);
    let file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(HashMap::new()),
        Err(e) => return Err(io_err(&path)(e)),
    };
    let mut out = HashMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(&path))?;
        // The cache is advisory: unreadable or foreign-dimension entries are recomputed.
        if let Ok(e) = serde_json::from_str::<EmbeddingLine>(&line) {
            if e.vector.dim() == dim {
                out.insert(e.record_id, e.vector);
            }
        }
    }
    Ok(out)
}
