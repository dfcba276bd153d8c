//! The personal concept database.
//!
//! Records live in memory behind a copy-on-write snapshot so readers never
//! block and never observe later writes. On disk a database is a directory
//! holding `manifest.json` and `concepts.jsonl` (one record per line, in
//! `concept_id` order).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::Embedding;
use crate::image::ImageRef;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "concepts.jsonl";

#[derive(Debug, Error)]
pub enum DbError {
    #[error("embedding dimension mismatch: database uses {expected}, record has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("concept name {name:?} is already used by concept {existing_id}")]
    DuplicateName { name: String, existing_id: String },
    #[error("invalid concept record: {0}")]
    InvalidRecord(String),
    #[error("no concept with id {0}")]
    NotFound(String),
    #[error("database was built with encoder {expected:?}, got {actual:?}")]
    EncoderMismatch { expected: String, actual: String },
    #[error("unsupported schema version {0} (this build reads version {SCHEMA_VERSION})")]
    SchemaVersionUnsupported(u32),
    #[error("corrupt record on line {line}: {reason}")]
    CorruptRecord { line: usize, reason: String },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DbError + '_ {
    move |source| DbError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One enrolled personal concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub concept_id: String,
    pub name: String,
    pub category: String,
    pub description: String,
    pub attributes: Vec<String>,
    pub visual_embedding: Embedding,
    pub textual_embedding: Embedding,
    pub reference_image: ImageRef,
    /// Reserved for multi-reference enrollment; the pipeline only reads
    /// `reference_image`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_reference_images: Vec<ImageRef>,
    pub enrolled_at: DateTime<Utc>,
}

impl ConceptRecord {
    /// Checks the record-level invariants (everything except cross-record
    /// uniqueness and the database-wide dimension).
    pub fn validate(&self) -> Result<(), DbError> {
        let invalid = |msg: &str| Err(DbError::InvalidRecord(format!("{}: {msg}", self.name)));
        if self.name.trim().is_empty() {
            return Err(DbError::InvalidRecord("name is empty".into()));
        }
        if self.category.trim().is_empty() {
            return invalid("category is empty");
        }
        if self.attributes.is_empty() {
            return invalid("attribute list is empty");
        }
        if self.attributes.iter().any(|a| a.trim().is_empty()) {
            return invalid("attribute list contains an empty entry");
        }
        if self.visual_embedding.dim() != self.textual_embedding.dim() {
            return Err(DbError::DimensionMismatch {
                expected: self.visual_embedding.dim(),
                actual: self.textual_embedding.dim(),
            });
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.visual_embedding.dim()
    }
}

/// Random 128-bit hex identifier.
pub fn new_concept_id() -> String {
    format!("{:032x}", rand::random::<u128>())
}

fn name_key(name: &str) -> String {
    name.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseManifest {
    pub schema_version: u32,
    /// `None` until the first record fixes the dimension.
    pub embedding_dim: Option<usize>,
    pub encoder_id: String,
    pub record_count: usize,
}

/// Immutable view of the database at one point in time.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    encoder_id: String,
    embedding_dim: Option<usize>,
    records: BTreeMap<String, Arc<ConceptRecord>>,
    names: BTreeMap<String, String>,
}

impl Snapshot {
    fn empty(encoder_id: String) -> Self {
        Self {
            encoder_id,
            embedding_dim: None,
            records: BTreeMap::new(),
            names: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records in ascending `concept_id` order.
    pub fn records(&self) -> impl ExactSizeIterator<Item = &ConceptRecord> + '_ {
        self.records.values().map(|r| r.as_ref())
    }

    pub fn get(&self, concept_id: &str) -> Option<&ConceptRecord> {
        self.records.get(concept_id).map(|r| r.as_ref())
    }

    /// Case-insensitive lookup by concept name.
    pub fn by_name(&self, name: &str) -> Option<&ConceptRecord> {
        self.names.get(&name_key(name)).and_then(|id| self.get(id))
    }

    pub fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embedding_dim
    }

    pub fn manifest(&self) -> DatabaseManifest {
        DatabaseManifest {
            schema_version: SCHEMA_VERSION,
            embedding_dim: self.embedding_dim,
            encoder_id: self.encoder_id.clone(),
            record_count: self.records.len(),
        }
    }

    fn check_name(&self, record: &ConceptRecord) -> Result<(), DbError> {
        match self.names.get(&name_key(&record.name)) {
            Some(existing) if *existing != record.concept_id => Err(DbError::DuplicateName {
                name: record.name.clone(),
                existing_id: existing.clone(),
            }),
            _ => Ok(()),
        }
    }

    fn insert(&mut self, record: ConceptRecord) -> Result<(), DbError> {
        record.validate()?;
        match self.embedding_dim {
            Some(dim) if dim != record.dim() => {
                return Err(DbError::DimensionMismatch {
                    expected: dim,
                    actual: record.dim(),
                })
            }
            Some(_) => {}
            None => self.embedding_dim = Some(record.dim()),
        }
        self.check_name(&record)?;
        if let Some(old) = self.records.get(&record.concept_id) {
            self.names.remove(&name_key(&old.name));
        }
        self.names
            .insert(name_key(&record.name), record.concept_id.clone());
        self.records
            .insert(record.concept_id.clone(), Arc::new(record));
        Ok(())
    }
}

/// Thread-safe handle to the personal database.
///
/// Any number of readers may call [`Database::snapshot`] concurrently; writers
/// are serialized and publish a new snapshot atomically.
#[derive(Debug)]
pub struct Database {
    current: RwLock<Arc<Snapshot>>,
    writer: Mutex<()>,
}

impl Database {
    /// An empty database. `encoder_id` may be empty, in which case the first
    /// enrollment adopts the encoder's id.
    pub fn new(encoder_id: impl Into<String>) -> Self {
        Self::from_snapshot(Snapshot::empty(encoder_id.into()))
    }

    fn from_snapshot(snapshot: Snapshot) -> Self {
        Self {
            current: RwLock::new(Arc::new(snapshot)),
            writer: Mutex::new(()),
        }
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().expect("database lock poisoned").clone()
    }

    fn write<T>(&self, f: impl FnOnce(&mut Snapshot) -> Result<T, DbError>) -> Result<T, DbError> {
        let _guard = self.writer.lock().expect("database writer poisoned");
        let mut next = Snapshot::clone(&self.snapshot());
        let out = f(&mut next)?;
        *self.current.write().expect("database lock poisoned") = Arc::new(next);
        Ok(out)
    }

    /// Inserts or replaces the record with the same `concept_id`. An empty
    /// `concept_id` is replaced by a fresh random one.
    pub fn upsert(&self, mut record: ConceptRecord) -> Result<ConceptRecord, DbError> {
        if record.concept_id.trim().is_empty() {
            record.concept_id = new_concept_id();
        }
        self.write(|snap| {
            snap.insert(record.clone())?;
            Ok(record)
        })
    }

    pub fn delete(&self, concept_id: &str) -> Result<ConceptRecord, DbError> {
        self.write(|snap| {
            let old = snap
                .records
                .remove(concept_id)
                .ok_or_else(|| DbError::NotFound(concept_id.to_string()))?;
            snap.names.remove(&name_key(&old.name));
            if snap.records.is_empty() {
                snap.embedding_dim = None;
            }
            Ok(ConceptRecord::clone(&old))
        })
    }

    /// Records `encoder_id` if the database has none yet, otherwise checks it.
    pub fn ensure_encoder(&self, encoder_id: &str) -> Result<(), DbError> {
        let snap = self.snapshot();
        if snap.encoder_id == encoder_id {
            return Ok(());
        }
        if !snap.encoder_id.is_empty() {
            return Err(DbError::EncoderMismatch {
                expected: snap.encoder_id.clone(),
                actual: encoder_id.to_string(),
            });
        }
        self.write(|s| {
            if s.encoder_id.is_empty() {
                s.encoder_id = encoder_id.to_string();
            }
            Ok(())
        })
    }

    /// Writes the database directory, replacing both files atomically.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), DbError> {
        let dir = dir.as_ref();
        let snap = self.snapshot();
        fs::create_dir_all(dir).map_err(io_err(dir))?;

        let mut lines = Vec::new();
        for record in snap.records() {
            serde_json::to_writer(&mut lines, record)
                .map_err(|e| DbError::InvalidRecord(e.to_string()))?;
            lines.push(b'\n');
        }
        write_atomic(&dir.join(RECORDS_FILE), &lines)?;

        let mut manifest = serde_json::to_vec_pretty(&snap.manifest())
            .map_err(|e| DbError::CorruptManifest(e.to_string()))?;
        manifest.push(b'\n');
        write_atomic(&dir.join(MANIFEST_FILE), &manifest)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, DbError> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
        let value: serde_json::Value =
            serde_json::from_slice(&raw).map_err(|e| DbError::CorruptManifest(e.to_string()))?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| DbError::CorruptManifest("missing schema_version".into()))?;
        if version != u64::from(SCHEMA_VERSION) {
            return Err(DbError::SchemaVersionUnsupported(
                u32::try_from(version).unwrap_or(u32::MAX),
            ));
        }
        let manifest: DatabaseManifest =
            serde_json::from_value(value).map_err(|e| DbError::CorruptManifest(e.to_string()))?;

        let mut snap = Snapshot::empty(manifest.encoder_id.clone());
        snap.embedding_dim = manifest.embedding_dim;

        let records_path = dir.join(RECORDS_FILE);
        let file = match fs::File::open(&records_path) {
            Ok(f) => Some(f),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound && manifest.record_count == 0 => {
                None
            }
            Err(e) => return Err(io_err(&records_path)(e)),
        };
        if let Some(file) = file {
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err(&records_path))?;
                if line.trim().is_empty() {
                    continue;
                }
                let corrupt = |reason: String| DbError::CorruptRecord {
                    line: idx + 1,
                    reason,
                };
                let record: ConceptRecord =
                    serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
                if snap.records.contains_key(&record.concept_id) {
                    return Err(corrupt(format!("duplicate concept_id {}", record.concept_id)));
                }
                snap.insert(record).map_err(|e| corrupt(e.to_string()))?;
            }
        }
        if snap.records.len() != manifest.record_count {
            return Err(DbError::CorruptManifest(format!(
                "record_count is {} but {} records were found",
                manifest.record_count,
                snap.records.len()
            )));
        }
        Ok(Self::from_snapshot(snap))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DbError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}
