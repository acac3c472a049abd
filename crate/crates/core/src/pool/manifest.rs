use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{validate_related_groups, MetricKind, NormStats, PoolLayout, PoolSpec, Splits, Task, TaskCounts, TaskId, TaskPool};
use crate::error::{Error, Result};

pub const POOL_MAGIC: &[u8; 4] = b"MTPL";
pub const POOL_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub id: TaskId,
    pub name: String,
    pub samples: usize,
    pub classes: usize,
    pub metric: MetricKind,
    #[serde(default)]
    pub related_group: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub data_file: Option<String>,
    #[serde(default)]
    pub meta_file: Option<String>,
}

impl TaskCounts for TaskEntry {
    fn sample_count(&self) -> usize {
        self.samples
    }
    fn class_count(&self) -> usize {
        self.classes
    }
}

/// JSON description of a pool: per-task counts and metric kinds, related
/// groups, normalization statistics and the generator specs it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolManifest {
    pub version: u32,
    pub tasks: Vec<TaskEntry>,
    pub related_groups: Vec<Vec<TaskId>>,
    #[serde(default)]
    pub normalization: Option<NormStats>,
    #[serde(default)]
    pub generator: Option<PoolSpec>,
}

impl PoolManifest {
    pub fn new(tasks: Vec<TaskEntry>, related_groups: Vec<Vec<TaskId>>) -> Self {
        PoolManifest {
            version: MANIFEST_VERSION,
            tasks,
            related_groups,
            normalization: None,
            generator: None,
        }
    }

    pub fn summary(&self) -> super::PoolSummary {
        super::pool_summary(&self.tasks)
    }

    pub fn validate(&self) -> Result<()> {
        let ids: Vec<TaskId> = self.tasks.iter().map(|t| t.id).collect();
        validate_related_groups(&ids, &self.related_groups)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("manifest serializes");
        hex(&Sha256::digest(&json))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: PoolManifest = serde_json::from_str(&text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::VersionMismatch {
                what: "pool manifest",
                found: m.version,
                supported: MANIFEST_VERSION,
            });
        }
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl PoolLayout for PoolManifest {
    fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.id).collect()
    }
    fn related_groups(&self) -> &[Vec<TaskId>] {
        &self.related_groups
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize, Deserialize)]
struct TaskMeta {
    image_size: (usize, usize, usize),
    labels: Vec<usize>,
    groups: Vec<u32>,
    splits: Splits,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `manifest.json` plus one binary image file and one metadata file
/// per task into `dir`.
pub fn save_pool(pool: &TaskPool, generator: Option<&PoolSpec>, dir: &Path) -> Result<PoolManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(pool.tasks.len());
    for t in &pool.tasks {
        let stem = format!("{:03}-{}", t.id.0, file_stem(&t.name));
        let data_file = format!("{stem}.mtpl");
        let meta_file = format!("{stem}.meta.json");
        let (c, h, w) = t.image_size;
        write_tensor_file(&dir.join(&data_file), &[t.len(), c, h, w], &t.images)?;
        let meta = TaskMeta {
            image_size: t.image_size,
            labels: t.labels.clone(),
            groups: t.groups.clone(),
            splits: t.splits.clone(),
        };
        let meta_path = dir.join(&meta_file);
        fs::write(&meta_path, serde_json::to_vec(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
        entries.push(TaskEntry {
            id: t.id,
            name: t.name.clone(),
            samples: t.len(),
            classes: t.classes,
            metric: t.metric,
            related_group: t.related_group.clone(),
            seed: generator.map(|g| g.task_seed(t.id)),
            data_file: Some(data_file),
            meta_file: Some(meta_file),
        });
    }
    let mut manifest = PoolManifest::new(entries, pool.related_groups.clone());
    manifest.normalization = Some(pool.norm.clone());
    manifest.generator = generator.cloned();
    manifest.write(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Loads a pool from a manifest path or from a directory containing
/// `manifest.json`.
pub fn load_pool(path: &Path) -> Result<(TaskPool, PoolManifest)> {
    let manifest_path: PathBuf = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let manifest = PoolManifest::read(&manifest_path)?;
    let norm = manifest.normalization.clone().ok_or_else(|| Error::Corrupt {
        what: "pool manifest",
        detail: "missing normalization statistics".into(),
    })?;
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for e in &manifest.tasks {
        let (Some(data_file), Some(meta_file)) = (&e.data_file, &e.meta_file) else {
            return Err(Error::Corrupt {
                what: "pool manifest",
                detail: format!("task `{}` has no data files", e.name),
            });
        };
        let (dims, images) = read_tensor_file(&dir.join(data_file))?;
        let meta_path = dir.join(meta_file);
        let meta: TaskMeta =
            serde_json::from_slice(&fs::read(&meta_path).map_err(|err| Error::io(&meta_path, err))?)?;
        let (c, h, w) = meta.image_size;
        if dims != [e.samples, c, h, w] || meta.labels.len() != e.samples {
            return Err(Error::Corrupt {
                what: "pool task",
                detail: format!("task `{}` data dims {dims:?} disagree with manifest", e.name),
            });
        }
        let task = Task {
            id: e.id,
            name: e.name.clone(),
            classes: e.classes,
            image_size: meta.image_size,
            images,
            labels: meta.labels,
            groups: meta.groups,
            splits: meta.splits,
            metric: e.metric,
            related_group: e.related_group.clone(),
        };
        tasks.push(task);
    }
    let pool = TaskPool::new(tasks, manifest.related_groups.clone(), norm)?;
    Ok((pool, manifest))
}

pub fn write_tensor_file(path: &Path, dims: &[usize], data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + dims.len() * 4 + data.len() * 4);
    buf.extend_from_slice(POOL_MAGIC);
    buf.extend_from_slice(&POOL_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |d: &str| Error::Corrupt {
        what: "pool tensor file",
        detail: d.to_string(),
    };
    if bytes.len() < 12 {
        return Err(corrupt("header truncated"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if &magic != POOL_MAGIC {
        return Err(Error::BadMagic {
            what: "pool tensor file",
            found: magic,
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("bounds checked"));
    let version = u32_at(4);
    if version != POOL_VERSION {
        return Err(Error::VersionMismatch {
            what: "pool tensor file",
            found: version,
            supported: POOL_VERSION,
        });
    }
    let ndims = u32_at(8) as usize;
    let header = 12 + 4 * ndims;
    if bytes.len() < header {
        return Err(corrupt("dims truncated"));
    }
    let dims: Vec<usize> = (0..ndims).map(|i| u32_at(12 + 4 * i) as usize).collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + 4 * count {
        return Err(corrupt(&format!(
            "payload has {} bytes, dims {dims:?} need {}",
            bytes.len() - header,
            4 * count
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Ok((dims, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_file_layout_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.mtpl");
        write_tensor_file(&p, &[1, 2], &[1.0, -2.5]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"MTPL");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(read_tensor_file(&p).unwrap(), (vec![1, 2], vec![1.0, -2.5]));
    }

    #[test]
    fn truncated_tensor_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.mtpl");
        write_tensor_file(&p, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_tensor_file(&p), Err(Error::Corrupt { .. })));
        fs::write(&p, b"XXXX\x01\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_tensor_file(&p), Err(Error::BadMagic { .. })));
    }
}
