use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::Protocol;
use crate::error::{Error, Result};
use crate::eval::{RunFailure, ScoreTable};
use crate::pool::{MetricKind, TaskId};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// One evaluated (protocol, combo, task, seed) cell. Records are only ever
/// appended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub protocol: Protocol,
    pub combo_id: String,
    pub target_task: TaskId,
    pub task_name: String,
    pub seed: u64,
    pub metric_kind: MetricKind,
    pub score: f64,
    /// Unix milliseconds.
    pub started_at: u64,
    pub finished_at: u64,
    pub config_hash: String,
    /// Protocol specific details (chosen C, chosen learning rate, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Identity of a result cell; a store holds at most one record per key.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordKey {
    pub protocol: Protocol,
    pub combo_id: String,
    pub task: TaskId,
    pub seed: u64,
}

impl ResultRecord {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            protocol: self.protocol,
            combo_id: self.combo_id.clone(),
            task: self.target_task,
            seed: self.seed,
        }
    }
}

pub fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Parses a JSONL file of records. Blank lines are skipped; a torn final
/// line (no trailing newline, left by an interrupted append) is ignored.
pub fn read_records(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut out = Vec::new();
    for (n, line) in complete.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ResultRecord = serde_json::from_str(line).map_err(|e| Error::Corrupt {
            what: "results store",
            detail: format!("line {}: {e}", n + 1),
        })?;
        if r.schema_version != RECORD_SCHEMA_VERSION {
            return Err(Error::VersionMismatch {
                what: "results store record",
                found: r.schema_version,
                supported: RECORD_SCHEMA_VERSION,
            });
        }
        out.push(r);
    }
    Ok(out)
}

struct Inner {
    file: File,
    records: Vec<ResultRecord>,
    keys: BTreeSet<RecordKey>,
}

/// Append-only JSONL store bound to one experiment config. Appends from
/// worker threads are serialized through a mutex.
pub struct ResultStore {
    path: PathBuf,
    config_hash: String,
    inner: Mutex<Inner>,
}

impl ResultStore {
    /// Opens (or creates) the store. Existing records must carry the same
    /// config hash; with `resume == false` an existing non-empty store is
    /// refused rather than silently extended.
    pub fn open(path: &Path, config_hash: &str, resume: bool) -> Result<Self> {
        let mut records = Vec::new();
        if path.exists() {
            records = read_records(path)?;
            if let Some(r) = records.iter().find(|r| r.config_hash != config_hash) {
                return Err(Error::ConfigHashMismatch {
                    path: path.to_path_buf(),
                    found: r.config_hash.clone(),
                    expected: config_hash.to_string(),
                });
            }
            if !records.is_empty() && !resume {
                return Err(Error::InvalidArgument(format!(
                    "results store {} already holds {} records; pass --resume to continue it",
                    path.display(),
                    records.len()
                )));
            }
            // Drop a torn tail so the next append starts on a fresh line.
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            if !text.is_empty() && !text.ends_with('\n') {
                let keep = text.rfind('\n').map_or(0, |i| i + 1);
                fs::write(path, &text[..keep]).map_err(|e| Error::io(path, e))?;
            }
        }
        let mut keys = BTreeSet::new();
        for r in &records {
            if !keys.insert(r.key()) {
                return Err(Error::Corrupt {
                    what: "results store",
                    detail: format!("duplicate record for {:?}", r.key()),
                });
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(ResultStore {
            path: path.to_path_buf(),
            config_hash: config_hash.to_string(),
            inner: Mutex::new(Inner { file, records, keys }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn contains(&self, key: &RecordKey) -> bool {
        self.inner.lock().expect("store lock").keys.contains(key)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<ResultRecord> {
        self.inner.lock().expect("store lock").records.clone()
    }

    /// Writes one line and flushes. A record whose key is already present is
    /// ignored, which keeps reruns idempotent.
    pub fn append(&self, record: ResultRecord) -> Result<bool> {
        if record.config_hash != self.config_hash {
            return Err(Error::ConfigHashMismatch {
                path: self.path.clone(),
                found: record.config_hash,
                expected: self.config_hash.clone(),
            });
        }
        if !record.score.is_finite() {
            return Err(Error::NonFinite(format!("score of {:?}", record.key())));
        }
        let mut inner = self.inner.lock().expect("store lock");
        if inner.keys.contains(&record.key()) {
            return Ok(false);
        }
        let mut line = serde_json::to_string(&record)?;
        line.push('\n');
        inner
            .file
            .write_all(line.as_bytes())
            .and_then(|_| inner.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        inner.keys.insert(record.key());
        inner.records.push(record);
        Ok(true)
    }
}

/// Scores of one protocol as a table keyed by (combo, task, seed).
pub fn score_table(records: &[ResultRecord], protocol: Protocol) -> Result<ScoreTable> {
    let mut table = ScoreTable::default();
    for r in records.iter().filter(|r| r.protocol == protocol) {
        table.insert(&r.combo_id, r.target_task, r.seed, r.metric_kind, r.score)?;
    }
    Ok(table)
}

/// Failed jobs, kept beside the store so a report can list them.
pub fn append_failures(path: &Path, failures: &[RunFailure]) -> Result<()> {
    if failures.is_empty() {
        return Ok(());
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for failure in failures {
        let mut line = serde_json::to_string(failure)?;
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_failures(path: &Path) -> Result<Vec<RunFailure>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Records grouped per (protocol, task) with scores in seed order.
pub fn scores_by_task(records: &[ResultRecord]) -> BTreeMap<(Protocol, TaskId), Vec<(u64, f64)>> {
    let mut out: BTreeMap<(Protocol, TaskId), Vec<(u64, f64)>> = BTreeMap::new();
    for r in records {
        out.entry((r.protocol, r.target_task)).or_default().push((r.seed, r.score));
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    }
    out
}
