//! Proof memory: validated steps with unit-length embeddings, served back as
//! context by cosine similarity.
//!
//! Entries are scoped by episode and immutable once recorded. Ranking is by
//! descending cosine similarity with ties broken by the older entry first.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backends, UsageRecord};
use crate::formal::{FormalError, FormalStatement};

pub type EntryId = u64;

/// Prefix of binder names spliced in from memory.
pub const INJECTED_PREFIX: &str = "h_mem_";

const UNIT_TOLERANCE: f64 = 1e-6;

/// Goal proposition of a validated statement with the binders it depends on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormalProposition {
    pub binders: Vec<String>,
    pub goal: String,
}

impl FormalProposition {
    /// Extracts the proposition, leaving out hypotheses that were themselves
    /// injected from memory.
    pub fn from_statement(statement: &FormalStatement) -> Result<Self, FormalError> {
        let parts = statement.parts()?;
        let binders = parts
            .binder_groups()
            .into_iter()
            .filter(|b| !b[1..].trim_start().starts_with(INJECTED_PREFIX))
            .collect();
        Ok(Self {
            binders,
            goal: parts.goal,
        })
    }

    /// Closed proposition usable as a hypothesis type in another statement.
    pub fn closed(&self) -> String {
        if self.binders.is_empty() {
            self.goal.clone()
        } else {
            format!("∀ {}, {}", self.binders.join(" "), self.goal)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub entry_id: EntryId,
    pub episode_id: String,
    pub step_text: String,
    pub formal_proposition: FormalProposition,
    pub embedding: Vec<f64>,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewEntry {
    pub episode_id: String,
    pub step_text: String,
    pub formal_proposition: FormalProposition,
    /// Any nonzero vector; normalized before storage.
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalRequest {
    pub query_text: String,
    pub k: usize,
    pub episode_id: Option<String>,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("embedding unavailable: {0}")]
    EmbeddingUnavailable(String),
    #[error("embedding dimension {got} does not match the run's dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("formal proposition is empty")]
    EmptyProposition,
    #[error("snapshot I/O: {0}")]
    Snapshot(#[from] std::io::Error),
    #[error("snapshot format: {0}")]
    SnapshotFormat(String),
}

/// Scales `v` to unit Euclidean length.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>, MemoryError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return Err(MemoryError::EmbeddingUnavailable(
            "embedding has zero or non-finite norm".into(),
        ));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum SnapshotLine {
    Header { episode_id: String, dimension: usize },
    Entry(MemoryEntry),
}

#[derive(Default)]
struct Inner {
    entries: Vec<MemoryEntry>,
    dimension: Option<usize>,
    next_id: EntryId,
}

#[derive(Default)]
pub struct MemoryStore {
    inner: RwLock<Inner>,
    snapshot_dir: Option<PathBuf>,
}

/// Query result with the normalized query vector, reusable for recording.
#[derive(Debug, Clone)]
pub struct Retrieved {
    pub entries: Vec<MemoryEntry>,
    pub query: Vec<f64>,
    pub usage: UsageRecord,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends every recorded entry to `<dir>/<episode>.memory.jsonl`.
    pub fn with_snapshots(dir: impl Into<PathBuf>) -> Self {
        Self {
            snapshot_dir: Some(dir.into()),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.inner.read().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn episode_len(&self, episode_id: &str) -> usize {
        self.inner
            .read()
            .unwrap()
            .entries
            .iter()
            .filter(|e| e.episode_id == episode_id)
            .count()
    }

    pub fn dimension(&self) -> Option<usize> {
        self.inner.read().unwrap().dimension
    }

    pub fn entries(&self, episode_id: &str) -> Vec<MemoryEntry> {
        self.inner
            .read()
            .unwrap()
            .entries
            .iter()
            .filter(|e| e.episode_id == episode_id)
            .cloned()
            .collect()
    }

    /// Stores a validated step. Recording the same text twice in one episode
    /// returns the existing id.
    pub fn record(&self, new: NewEntry) -> Result<EntryId, MemoryError> {
        if new.formal_proposition.goal.trim().is_empty() {
            return Err(MemoryError::EmptyProposition);
        }
        let embedding = normalize(&new.embedding)?;
        let mut inner = self.inner.write().unwrap();
        if let Some(existing) = inner
            .entries
            .iter()
            .find(|e| e.episode_id == new.episode_id && e.step_text == new.step_text)
        {
            return Ok(existing.entry_id);
        }
        match inner.dimension {
            Some(d) if d != embedding.len() => {
                return Err(MemoryError::DimensionMismatch {
                    expected: d,
                    got: embedding.len(),
                })
            }
            Some(_) => {}
            None => inner.dimension = Some(embedding.len()),
        }
        let id = inner.next_id;
        inner.next_id += 1;
        let entry = MemoryEntry {
            entry_id: id,
            episode_id: new.episode_id,
            step_text: new.step_text,
            formal_proposition: new.formal_proposition,
            embedding,
            created_at: id,
        };
        if let Some(dir) = &self.snapshot_dir {
            append_snapshot(dir, &entry)?;
        }
        inner.entries.push(entry);
        Ok(id)
    }

    /// Top-`k` entries by cosine similarity to `query`. Similarities that
    /// agree to [`TIE_RESOLUTION`] are ties and keep insertion order.
    pub fn rank(&self, query: &[f64], k: usize, episode_id: Option<&str>) -> Result<Vec<MemoryEntry>, MemoryError> {
        let query = normalize(query)?;
        let inner = self.inner.read().unwrap();
        if let Some(d) = inner.dimension {
            if d != query.len() {
                return Err(MemoryError::DimensionMismatch {
                    expected: d,
                    got: query.len(),
                });
            }
        }
        let mut scored: Vec<(i64, &MemoryEntry)> = inner
            .entries
            .iter()
            .filter(|e| episode_id.map_or(true, |ep| e.episode_id == ep))
            .map(|e| (tie_key(dot(&query, &e.embedding)), e))
            .collect();
        scored.sort_by(|(sa, ea), (sb, eb)| sb.cmp(sa).then(ea.created_at.cmp(&eb.created_at)));
        Ok(scored.into_iter().take(k).map(|(_, e)| e.clone()).collect())
    }

    /// Embeds the query text and ranks against the store.
    pub async fn retrieve(&self, backends: &Backends, request: &RetrievalRequest) -> Result<Retrieved, MemoryError> {
        let embedded = backends
            .embed(&request.query_text)
            .await
            .map_err(|e| MemoryError::EmbeddingUnavailable(e.to_string()))?;
        let query = normalize(&embedded.vector)?;
        let entries = self.rank(&query, request.k, request.episode_id.as_deref())?;
        Ok(Retrieved {
            entries,
            query,
            usage: embedded.usage,
        })
    }
}

/// Similarities closer than this compare equal.
pub const TIE_RESOLUTION: f64 = 1e-9;

fn tie_key(similarity: f64) -> i64 {
    (similarity / TIE_RESOLUTION).round() as i64
}

fn snapshot_path(dir: &Path, episode_id: &str) -> PathBuf {
    let safe: String = episode_id
        .chars()
        .map(|c| if c.is_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    dir.join(format!("{safe}.memory.jsonl"))
}

fn append_snapshot(dir: &Path, entry: &MemoryEntry) -> Result<(), MemoryError> {
    std::fs::create_dir_all(dir)?;
    let path = snapshot_path(dir, &entry.episode_id);
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    let mut out = String::new();
    if fresh {
        out.push_str(&serde_json::to_string(&SnapshotLine::Header {
            episode_id: entry.episode_id.clone(),
            dimension: entry.embedding.len(),
        })
        .expect("header serializes"));
        out.push('\n');
    }
    out.push_str(&serde_json::to_string(&SnapshotLine::Entry(entry.clone())).expect("entry serializes"));
    out.push('\n');
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads an episode snapshot, checking every entry against the header's
/// dimension and the unit-norm invariant.
pub fn load_snapshot(path: &Path) -> Result<(usize, Vec<MemoryEntry>), MemoryError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut dimension = None;
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SnapshotLine = serde_json::from_str(&line)
            .map_err(|e| MemoryError::SnapshotFormat(format!("line {}: {e}", i + 1)))?;
        match parsed {
            SnapshotLine::Header { dimension: d, .. } => dimension = Some(d),
            SnapshotLine::Entry(e) => {
                let d = dimension.ok_or_else(|| MemoryError::SnapshotFormat("entry before header".into()))?;
                if e.embedding.len() != d {
                    return Err(MemoryError::DimensionMismatch {
                        expected: d,
                        got: e.embedding.len(),
                    });
                }
                let norm = e.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(MemoryError::SnapshotFormat(format!(
                        "line {}: embedding norm {norm}",
                        i + 1
                    )));
                }
                entries.push(e);
            }
        }
    }
    let dimension = dimension.ok_or_else(|| MemoryError::SnapshotFormat("missing header".into()))?;
    Ok((dimension, entries))
}
