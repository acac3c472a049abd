//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MTLW" | version u32
//! tensor count u32, then per tensor:
//!     name length u32 | name (UTF-8) | rank u32 | dims u32… | f32 payload
//! batch-norm layer count u32, then per layer:
//!     channels u32 | momentum f64 | eps f64 | running mean f32… | running var f32…
//! metadata length u64 | metadata JSON
//! ```
//!
//! The tensor table holds every parameter value followed by every momentum
//! buffer (named `<param>@momentum`), so a loaded model can resume training
//! exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::MtlModel;
use crate::nn::{BnMode, TrunkConfig};
use crate::pool::TaskId;
use crate::trainer::{HyperCombo, TrainSchedule};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTLW";
pub const CHECKPOINT_VERSION: u32 = 1;
const MOMENTUM_SUFFIX: &str = "@momentum";

/// Provenance and structure stored alongside the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub combo: Option<HyperCombo>,
    pub schedule: Option<TrainSchedule>,
    pub seed: u64,
    pub pool_hash: Option<String>,
    pub trunk: TrunkConfig,
    /// `(task, classes)` in parameter registration order.
    pub heads: Vec<(TaskId, usize)>,
    pub mode: BnMode,
}

impl CheckpointMeta {
    pub fn for_model(model: &MtlModel<f32>, seed: u64) -> Self {
        let mut heads: Vec<_> = model.heads.values().map(|h| (h.weight, h.task, h.classes)).collect();
        heads.sort_by_key(|(w, _, _)| *w);
        CheckpointMeta {
            combo: None,
            schedule: None,
            seed,
            pool_hash: None,
            trunk: model.trunk.config.clone(),
            heads: heads.into_iter().map(|(_, t, c)| (t, c)).collect(),
            mode: model.mode(),
        }
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.u32(name.len());
        self.0.extend_from_slice(name.as_bytes());
        self.u32(t.rank());
        for &d in t.dims() {
            self.u32(d);
        }
        self.f32s(t.data());
    }
}

/// Serializes `model` and `meta` into checkpoint bytes.
pub fn checkpoint_bytes(model: &MtlModel<f32>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    w.u32(2 * model.params.len());
    for (_, p) in model.params.iter() {
        w.tensor(&p.name, &p.value);
    }
    for (_, p) in model.params.iter() {
        w.tensor(&format!("{}{MOMENTUM_SUFFIX}", p.name), &p.momentum);
    }
    w.u32(model.bn.len());
    for s in &model.bn {
        w.u32(s.channels());
        w.f64(s.momentum);
        w.f64(s.eps);
        w.f32s(&s.running_mean);
        w.f32s(&s.running_var);
    }
    let json = serde_json::to_vec(meta)?;
    w.0.extend_from_slice(&(json.len() as u64).to_le_bytes());
    w.0.extend_from_slice(&json);
    Ok(w.0)
}

/// Writes atomically: the bytes go to a sibling temporary file that is then
/// renamed over `path`.
pub fn save_checkpoint(model: &MtlModel<f32>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(model, meta)?;
    let tmp = path.with_extension("mtlw.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt {
        what: "checkpoint",
        detail: detail.into(),
    }
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| corrupt("length overflow"))?;
        Ok(self
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
        let rank = self.u32()?;
        let dims = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt("dims overflow"))?;
        let data = self.f32s(count)?;
        let t = Tensor::new(dims, data).map_err(|e| corrupt(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }
}

/// Parses checkpoint bytes. Either the whole model is returned or an error;
/// a partially read model is never exposed.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<(MtlModel<f32>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r
        .take(4)
        .map_err(|_| corrupt("file shorter than the header"))?
        .try_into()
        .expect("4 bytes");
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            found: magic,
        });
    }
    let version = r.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            what: "checkpoint",
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()?;
    let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let layers = r.u32()?;
    let mut bn = Vec::with_capacity(layers);
    for _ in 0..layers {
        let channels = r.u32()?;
        let momentum = r.f64()?;
        let eps = r.f64()?;
        let mean = r.f32s(channels)?;
        let var = r.f32s(channels)?;
        bn.push((momentum, eps, mean, var));
    }
    let meta_len = r.u64()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(format!("metadata: {e}")))?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut model = MtlModel::<f32>::build_trunk(&meta.trunk, 0)?;
    for &(task, classes) in &meta.heads {
        model.add_head(task, classes, 0)?;
    }
    if count != 2 * model.params.len() {
        return Err(corrupt(format!(
            "{count} tensors stored, architecture needs {}",
            2 * model.params.len()
        )));
    }
    if layers != model.bn.len() {
        return Err(corrupt(format!("{layers} batch-norm layers stored, architecture has {}", model.bn.len())));
    }
    let n = model.params.len();
    for (i, p) in model.params.iter_mut().enumerate() {
        let (name, value) = &tensors[i];
        let (mname, momentum) = &tensors[n + i];
        if *name != p.name || *mname != format!("{}{MOMENTUM_SUFFIX}", p.name) {
            return Err(corrupt(format!("tensor `{name}` found where `{}` was expected", p.name)));
        }
        if value.dims() != p.value.dims() || momentum.dims() != p.value.dims() {
            return Err(corrupt(format!("tensor `{name}` has dims {:?}", value.dims())));
        }
        p.value = value.clone();
        p.momentum = momentum.clone();
        p.grad.fill(0.0);
    }
    for (state, (momentum, eps, mean, var)) in model.bn.iter_mut().zip(bn) {
        if mean.len() != state.channels() {
            return Err(corrupt("batch-norm channel count disagrees with the architecture"));
        }
        state.momentum = momentum;
        state.eps = eps;
        state.running_mean = mean;
        state.running_var = var;
    }
    model.set_mode(meta.mode);
    Ok((model, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(MtlModel<f32>, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
