//! Persisted prior versions of fetched datasets, and keyed diffs between
//! versions.
//!
//! Layout under the store root (one directory per use case, trivially
//! inspectable):
//!
//! ```text
//! snapshots/<use_case_id>/<key>.snap      canonical payload
//! snapshots/<use_case_id>/<key>.meta      hash, captured_at, history index
//! snapshots/<use_case_id>/<key>.<n>.snap  history, most recent H kept
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ingest;
use crate::util::{write_atomic, FileLock, LockError};
use crate::value::{render_record, Record, RecordSet, Value};

/// Default number of retained versions per (use case, key), live version
/// included: one year of monthly snapshots at the default cadence.
pub const DEFAULT_HISTORY: usize = 12;

/// A persisted canonical version of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub use_case_id: String,
    /// A period's "YYYY-MM" or the literal "latest".
    pub key: String,
    pub captured_at: DateTime<Utc>,
    /// SHA-256 of the canonical payload, 64 hex chars.
    pub content_hash: String,
    pub payload: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SnapshotMeta {
    content_hash: String,
    captured_at: DateTime<Utc>,
    next_history_index: u64,
    history: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HistoryEntry {
    index: u64,
    content_hash: String,
    captured_at: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("invalid snapshot key {0:?}")]
    InvalidKey(String),
    #[error("snapshot {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error("corrupt snapshot for ({use_case_id}, {key}): stored hash {expected} but payload hashes to {actual}")]
    Corrupt {
        use_case_id: String,
        key: String,
        expected: String,
        actual: String,
    },
    #[error("corrupt snapshot metadata for ({use_case_id}, {key}): {message}")]
    CorruptMeta {
        use_case_id: String,
        key: String,
        message: String,
    },
    #[error("record {index} lacks key field {field:?}")]
    MissingKeyField { index: usize, field: String },
}

/// Deterministic text form of a record set: one JSON object per line,
/// keys sorted within each record, records sorted by their serialized
/// line, decimals without trailing zeros, LF line endings. The result is
/// itself a JSON array, so it parses back through the JSON ingest path.
pub fn canonicalize(record_set: &RecordSet) -> String {
    if record_set.records.is_empty() {
        return "[]\n".to_string();
    }
    let mut lines: Vec<String> = record_set.records.iter().map(render_record).collect();
    lines.sort_unstable();
    let mut out = String::from("[\n");
    out.push_str(&lines.join(",\n"));
    out.push_str("\n]\n");
    out
}

/// Parses canonical text back into records (order as stored, i.e. sorted).
pub fn parse_canonical(payload: &str) -> Result<RecordSet, ingest::IngestError> {
    ingest::parse_json(payload.as_bytes(), None)
}

pub fn content_hash(payload: &str) -> String {
    hex::encode(Sha256::digest(payload.as_bytes()))
}

/// Filesystem-backed snapshot store rooted at one directory.
#[derive(Debug, Clone)]
pub struct SnapshotStore {
    root: PathBuf,
    history_limit: usize,
}

impl SnapshotStore {
    pub fn open(root: impl Into<PathBuf>) -> SnapshotStore {
        SnapshotStore {
            root: root.into(),
            history_limit: DEFAULT_HISTORY,
        }
    }

    pub fn with_history_limit(mut self, limit: usize) -> SnapshotStore {
        self.history_limit = limit;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn use_case_dir(&self, use_case_id: &str) -> PathBuf {
        self.root.join(use_case_id)
    }

    fn check_key(key: &str) -> Result<(), StoreError> {
        let ok = !key.is_empty()
            && key
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '-');
        if ok {
            Ok(())
        } else {
            Err(StoreError::InvalidKey(key.to_string()))
        }
    }

    /// Persists the canonical form of `record_set` for (use_case_id, key).
    /// The prior version, if any, rotates into history, bounded to the
    /// most recent `history_limit` entries. Crash-safe: temp + rename.
    pub fn save(
        &self,
        use_case_id: &str,
        key: &str,
        record_set: &RecordSet,
        now: DateTime<Utc>,
    ) -> Result<Snapshot, StoreError> {
        Self::check_key(key)?;
        let dir = self.use_case_dir(use_case_id);
        let io = |path: &Path, e: std::io::Error| StoreError::Io {
            path: path.display().to_string(),
            source: e,
        };
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let _guard = FileLock::acquire(&dir.join(".lock"))?;

        let payload = canonicalize(record_set);
        let hash = content_hash(&payload);
        let snap_path = dir.join(format!("{key}.snap"));
        let meta_path = dir.join(format!("{key}.meta"));

        let mut meta = match self.read_meta(&meta_path)? {
            Some(mut prior) => {
                // Rotate the current version into history.
                let index = prior.next_history_index;
                let history_path = dir.join(format!("{key}.{index}.snap"));
                fs::rename(&snap_path, &history_path).map_err(|e| io(&snap_path, e))?;
                prior.history.push(HistoryEntry {
                    index,
                    content_hash: prior.content_hash.clone(),
                    captured_at: prior.captured_at,
                });
                prior.next_history_index += 1;
                // The bound counts the live version too: H total retained.
                let max_history = self.history_limit.saturating_sub(1);
                while prior.history.len() > max_history {
                    let oldest = prior.history.remove(0);
                    let path = dir.join(format!("{key}.{}.snap", oldest.index));
                    if let Err(e) = fs::remove_file(&path) {
                        log::warn!("failed to prune history file {}: {e}", path.display());
                    }
                }
                prior
            }
            None => SnapshotMeta {
                content_hash: String::new(),
                captured_at: now,
                next_history_index: 1,
                history: Vec::new(),
            },
        };
        meta.content_hash = hash.clone();
        meta.captured_at = now;

        write_atomic(&snap_path, payload.as_bytes()).map_err(|e| io(&snap_path, e))?;
        let meta_bytes = serde_json::to_vec_pretty(&meta).expect("meta serialization");
        write_atomic(&meta_path, &meta_bytes).map_err(|e| io(&meta_path, e))?;

        Ok(Snapshot {
            use_case_id: use_case_id.to_string(),
            key: key.to_string(),
            captured_at: now,
            content_hash: hash,
            payload,
        })
    }

    /// Most recent snapshot for the pair, or `None` on first run. A hash
    /// mismatch is reported as [`StoreError::Corrupt`]; callers treat it
    /// as none plus a warning.
    pub fn load_previous(
        &self,
        use_case_id: &str,
        key: &str,
    ) -> Result<Option<Snapshot>, StoreError> {
        Self::check_key(key)?;
        let dir = self.use_case_dir(use_case_id);
        let meta_path = dir.join(format!("{key}.meta"));
        let snap_path = dir.join(format!("{key}.snap"));
        let Some(meta) = self.read_meta(&meta_path)? else {
            return Ok(None);
        };
        let payload = match fs::read_to_string(&snap_path) {
            Ok(p) => p,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::CorruptMeta {
                    use_case_id: use_case_id.to_string(),
                    key: key.to_string(),
                    message: "metadata exists but payload file is missing".into(),
                })
            }
            Err(e) => {
                return Err(StoreError::Io {
                    path: snap_path.display().to_string(),
                    source: e,
                })
            }
        };
        let actual = content_hash(&payload);
        if actual != meta.content_hash {
            return Err(StoreError::Corrupt {
                use_case_id: use_case_id.to_string(),
                key: key.to_string(),
                expected: meta.content_hash,
                actual,
            });
        }
        Ok(Some(Snapshot {
            use_case_id: use_case_id.to_string(),
            key: key.to_string(),
            captured_at: meta.captured_at,
            content_hash: meta.content_hash,
            payload,
        }))
    }

    /// History hashes for the pair, oldest first (for inspection/tests).
    pub fn history(&self, use_case_id: &str, key: &str) -> Result<Vec<String>, StoreError> {
        let meta_path = self.use_case_dir(use_case_id).join(format!("{key}.meta"));
        Ok(self
            .read_meta(&meta_path)?
            .map(|m| m.history.iter().map(|h| h.content_hash.clone()).collect())
            .unwrap_or_default())
    }

    fn read_meta(&self, path: &Path) -> Result<Option<SnapshotMeta>, StoreError> {
        match fs::read(path) {
            Ok(bytes) => {
                let meta =
                    serde_json::from_slice(&bytes).map_err(|e| StoreError::CorruptMeta {
                        use_case_id: String::new(),
                        key: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                Ok(Some(meta))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(StoreError::Io {
                path: path.display().to_string(),
                source: e,
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Diff
// ---------------------------------------------------------------------------

/// One changed field on a record matched across versions. `None` means
/// the field is absent on that side.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldChange {
    pub record_key: String,
    pub field: String,
    pub old: Option<Value>,
    pub new: Option<Value>,
}

/// Differences between two record sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DiffResult {
    pub added: Vec<Record>,
    pub removed: Vec<Record>,
    pub changed: Vec<FieldChange>,
}

impl DiffResult {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.changed.is_empty()
    }
}

/// Compares record sets. With key fields, records match by the tuple of
/// key values and differing non-key fields become [`FieldChange`]s; with
/// no key fields, records match by full canonical equality, so only
/// added/removed occur. Duplicate key tuples match positionally in
/// canonical order.
pub fn diff(
    old: &RecordSet,
    new: &RecordSet,
    key_fields: &[String],
) -> Result<DiffResult, StoreError> {
    let mut old_sorted: Vec<&Record> = old.records.iter().collect();
    let mut new_sorted: Vec<&Record> = new.records.iter().collect();
    old_sorted.sort_by_key(|r| render_record(r));
    new_sorted.sort_by_key(|r| render_record(r));

    if key_fields.is_empty() {
        return Ok(diff_by_equality(&old_sorted, &new_sorted));
    }

    let key_of = |record: &Record, index: usize| -> Result<String, StoreError> {
        let mut parts = Vec::with_capacity(key_fields.len());
        for field in key_fields {
            let value = record.get(field).ok_or_else(|| StoreError::MissingKeyField {
                index,
                field: field.clone(),
            })?;
            parts.push(value.render());
        }
        Ok(parts.join("|"))
    };

    let mut old_groups: BTreeMap<String, Vec<&Record>> = BTreeMap::new();
    for (i, record) in old_sorted.iter().enumerate() {
        old_groups.entry(key_of(record, i)?).or_default().push(record);
    }
    let mut new_groups: BTreeMap<String, Vec<&Record>> = BTreeMap::new();
    for (i, record) in new_sorted.iter().enumerate() {
        new_groups.entry(key_of(record, i)?).or_default().push(record);
    }

    let mut result = DiffResult::default();
    let mut keys: Vec<&String> = old_groups.keys().chain(new_groups.keys()).collect();
    keys.sort_unstable();
    keys.dedup();

    for key in keys {
        let empty = Vec::new();
        let olds = old_groups.get(key).unwrap_or(&empty);
        let news = new_groups.get(key).unwrap_or(&empty);
        let paired = olds.len().min(news.len());
        for i in 0..paired {
            changed_fields(key, olds[i], news[i], key_fields, &mut result.changed);
        }
        for record in &olds[paired..] {
            result.removed.push((*record).clone());
        }
        for record in &news[paired..] {
            result.added.push((*record).clone());
        }
    }
    Ok(result)
}

fn diff_by_equality(old_sorted: &[&Record], new_sorted: &[&Record]) -> DiffResult {
    // Multiset difference over canonical renderings.
    let mut counts: BTreeMap<String, i64> = BTreeMap::new();
    for record in old_sorted {
        *counts.entry(render_record(record)).or_default() -= 1;
    }
    for record in new_sorted {
        *counts.entry(render_record(record)).or_default() += 1;
    }
    let mut result = DiffResult::default();
    for record in new_sorted {
        let line = render_record(record);
        let n = counts.get_mut(&line).expect("counted");
        if *n > 0 {
            result.added.push((*record).clone());
            *n -= 1;
        }
    }
    for record in old_sorted {
        let line = render_record(record);
        let n = counts.get_mut(&line).expect("counted");
        if *n < 0 {
            result.removed.push((*record).clone());
            *n += 1;
        }
    }
    result
}

fn changed_fields(
    key: &str,
    old: &Record,
    new: &Record,
    key_fields: &[String],
    out: &mut Vec<FieldChange>,
) {
    let mut fields: Vec<&String> = old.keys().chain(new.keys()).collect();
    fields.sort_unstable();
    fields.dedup();
    for field in fields {
        if key_fields.contains(field) {
            continue;
        }
        let old_value = old.get(field);
        let new_value = new.get(field);
        if old_value != new_value {
            out.push(FieldChange {
                record_key: key.to_string(),
                field: field.clone(),
                old: old_value.cloned(),
                new: new_value.cloned(),
            });
        }
    }
}
