//! C ABI over the workbench: load a task pool and a trained checkpoint, pull
//! trunk features out, and reuse the metric and model-selection routines.
//!
//! Every fallible call returns an [`MtlwStatus`]. On anything but
//! `MTLW_STATUS_OK` a description is kept per thread and can be read with
//! [`mtlw_last_error`]. Pools and models are opaque handles owned by the
//! caller and released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use mtl_workbench::eval::{accuracy, average_rank, roc_auc, select_combo, significant, RankMatrix};
use mtl_workbench::model::MtlModel;
use mtl_workbench::nn::BnMode;
use mtl_workbench::pool::{load_pool, TaskId, TaskPool};
use mtl_workbench::transfer::task_features;
use mtl_workbench::workbench::load_checkpoint;
use mtl_workbench::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MtlwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Corrupt = 4,
    VersionMismatch = 5,
    UnknownTask = 6,
    BufferTooSmall = 7,
    Failed = 8,
    Panic = 9,
}

/// Loaded task pool.
pub struct MtlwPool {
    pool: TaskPool,
}

/// Trained model restored from a checkpoint, held in evaluation mode.
pub struct MtlwModel {
    model: MtlModel<f32>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MtlwPoolSummary {
    pub task_count: usize,
    pub class_total: usize,
    pub image_total: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct MtlwTaskInfo {
    pub id: u32,
    pub classes: usize,
    pub samples: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> MtlwStatus {
    match err {
        Error::Io { .. } => MtlwStatus::Io,
        Error::Corrupt { .. } | Error::BadMagic { .. } | Error::Json(_) => MtlwStatus::Corrupt,
        Error::VersionMismatch { .. } => MtlwStatus::VersionMismatch,
        Error::UnknownTask(_) => MtlwStatus::UnknownTask,
        Error::InvalidArgument(_) | Error::InvalidConfig(_) | Error::Shape { .. } | Error::SingleClass(_) => {
            MtlwStatus::InvalidArgument
        }
        _ => MtlwStatus::Failed,
    }
}

struct Fail(MtlwStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: MtlwStatus, message: impl Into<String>) -> Fail {
    Fail(status, message.into())
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MtlwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MtlwStatus::Ok
        }
        Ok(Err(Fail(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            MtlwStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(fail(MtlwStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(MtlwStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(MtlwStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| fail(MtlwStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(MtlwStatus::NullPointer, format!("{what} handle is null")))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn mtlw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mtlw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a pool from a directory holding `manifest.json` or from the manifest
/// file itself.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mtlw_pool_load(path: *const c_char, out: *mut *mut MtlwPool) -> MtlwStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let (pool, _) = load_pool(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MtlwPool { pool }));
        Ok(())
    })
}

/// # Safety
/// `pool` must come from [`mtlw_pool_load`] and not be freed twice; null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn mtlw_pool_free(pool: *mut MtlwPool) {
    if !pool.is_null() {
        drop(Box::from_raw(pool));
    }
}

/// # Safety
/// `pool` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtlw_pool_summary(pool: *const MtlwPool, out: *mut MtlwPoolSummary) -> MtlwStatus {
    guard(|| {
        let s = handle(pool, "pool")?.pool.summary();
        *out_arg(out, "out")? = MtlwPoolSummary {
            task_count: s.task_count,
            class_total: s.class_total,
            image_total: s.image_total,
        };
        Ok(())
    })
}

/// Describes the task at position `index` (0-based, in pool order).
///
/// # Safety
/// `pool` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtlw_pool_task_info(pool: *const MtlwPool, index: usize, out: *mut MtlwTaskInfo) -> MtlwStatus {
    guard(|| {
        let pool = &handle(pool, "pool")?.pool;
        let task = pool.tasks.get(index).ok_or_else(|| {
            fail(
                MtlwStatus::InvalidArgument,
                format!("task index {index} out of range (pool has {})", pool.tasks.len()),
            )
        })?;
        let (channels, height, width) = task.image_size;
        *out_arg(out, "out")? = MtlwTaskInfo {
            id: task.id.0,
            classes: task.classes,
            samples: task.len(),
            channels,
            height,
            width,
        };
        Ok(())
    })
}

/// Restores a model from a checkpoint file and switches it to evaluation mode.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mtlw_model_load(path: *const c_char, out: *mut *mut MtlwModel) -> MtlwStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let (mut model, _) = load_checkpoint(&path_arg(path)?)?;
        model.set_mode(BnMode::Eval);
        *out = Box::into_raw(Box::new(MtlwModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`mtlw_model_load`] and not be freed twice; null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn mtlw_model_free(model: *mut MtlwModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of one feature vector.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtlw_model_feature_dim(model: *const MtlwModel, out: *mut usize) -> MtlwStatus {
    guard(|| {
        *out_arg(out, "out")? = handle(model, "model")?.model.feature_dim();
        Ok(())
    })
}

/// Trunk features of `n` images given as normalized row-major `n × C × H × W`
/// floats. Writes `n × feature_dim` floats to `out`.
///
/// # Safety
/// `images` must hold `n · C · H · W` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mtlw_model_extract_features(
    model: *const MtlwModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> MtlwStatus {
    guard(|| {
        let model = &handle(model, "model")?.model;
        let (c, h, w) = model.trunk.config.input_size;
        let need = n * model.feature_dim();
        if out_len < need {
            return Err(fail(MtlwStatus::BufferTooSmall, format!("need {need} floats, got {out_len}")));
        }
        if n == 0 {
            return Ok(());
        }
        let data = slice_arg(images, n * c * h * w, "images")?.to_vec();
        let tensor = mtl_workbench::autograd::Tensor::new(vec![n, c, h, w], data)?;
        let features = model.extract_features(&tensor)?;
        let out = std::slice::from_raw_parts_mut(out, need);
        out.copy_from_slice(features.data());
        Ok(())
    })
}

/// Features of every sample of pool task `index`, normalized with the pool's
/// statistics first. Writes `samples × feature_dim` doubles.
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mtlw_task_features(
    model: *const MtlwModel,
    pool: *const MtlwPool,
    index: usize,
    out: *mut f64,
    out_len: usize,
) -> MtlwStatus {
    guard(|| {
        let model = &handle(model, "model")?.model;
        let pool = &handle(pool, "pool")?.pool;
        let task = pool
            .tasks
            .get(index)
            .ok_or_else(|| fail(MtlwStatus::InvalidArgument, format!("task index {index} out of range")))?;
        let need = task.len() * model.feature_dim();
        if out_len < need {
            return Err(fail(MtlwStatus::BufferTooSmall, format!("need {need} doubles, got {out_len}")));
        }
        if out.is_null() {
            return Err(fail(MtlwStatus::NullPointer, "out is null"));
        }
        let indices: Vec<usize> = (0..task.len()).collect();
        let features = task_features(model, task, &indices, &pool.norm)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(&features);
        Ok(())
    })
}

/// Area under the ROC curve of binary `labels` (0 or 1) scored by `scores`;
/// ties count one half.
///
/// # Safety
/// Both arrays must hold `n` elements and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlw_roc_auc(scores: *const f64, labels: *const u32, n: usize, out: *mut f64) -> MtlwStatus {
    guard(|| {
        let scores = slice_arg(scores, n, "scores")?;
        let labels: Vec<usize> = slice_arg(labels, n, "labels")?.iter().map(|&l| l as usize).collect();
        *out_arg(out, "out")? = roc_auc(scores, &labels)?;
        Ok(())
    })
}

/// Fraction of `predictions` equal to `labels`.
///
/// # Safety
/// Both arrays must hold `n` elements and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlw_accuracy(predictions: *const u32, labels: *const u32, n: usize, out: *mut f64) -> MtlwStatus {
    guard(|| {
        let p: Vec<usize> = slice_arg(predictions, n, "predictions")?.iter().map(|&v| v as usize).collect();
        let l: Vec<usize> = slice_arg(labels, n, "labels")?.iter().map(|&v| v as usize).collect();
        *out_arg(out, "out")? = accuracy(&p, &l)?;
        Ok(())
    })
}

/// Rank matrix over row indices: combo `i` gets the id `i` zero-padded, so
/// lexicographic tie-breaking follows row order.
unsafe fn rank_matrix_arg(ranks: *const f64, combos: usize, tasks: usize) -> Result<RankMatrix, Fail> {
    if combos == 0 || tasks == 0 {
        return Err(fail(MtlwStatus::InvalidArgument, "rank matrix must have rows and columns"));
    }
    let flat = slice_arg(ranks, combos * tasks, "ranks")?;
    if flat.iter().any(|r| !r.is_finite()) {
        return Err(fail(MtlwStatus::InvalidArgument, "ranks must be finite"));
    }
    Ok(RankMatrix {
        combos: (0..combos).map(|i| format!("{i:010}")).collect(),
        tasks: (0..tasks as u32).map(TaskId).collect(),
        ranks: flat.chunks(tasks).map(<[f64]>::to_vec).collect(),
    })
}

/// Mean rank per row of a row-major `combos × tasks` matrix. Pass a negative
/// `exclude_column` to average over every column.
///
/// # Safety
/// `ranks` must hold `combos · tasks` doubles and `out` `combos` doubles.
#[no_mangle]
pub unsafe extern "C" fn mtlw_average_rank(
    ranks: *const f64,
    combos: usize,
    tasks: usize,
    exclude_column: i64,
    out: *mut f64,
) -> MtlwStatus {
    guard(|| {
        let rm = rank_matrix_arg(ranks, combos, tasks)?;
        let exclude = match exclude_column {
            c if c < 0 => None,
            c => Some(TaskId(u32::try_from(c).map_err(|_| fail(MtlwStatus::InvalidArgument, "column out of range"))?)),
        };
        let avg = average_rank(&rm, exclude)?;
        if out.is_null() {
            return Err(fail(MtlwStatus::NullPointer, "out is null"));
        }
        std::slice::from_raw_parts_mut(out, combos).copy_from_slice(&avg);
        Ok(())
    })
}

/// Row with the lowest average rank once `target_column` is dropped; the
/// lowest row index wins ties.
///
/// # Safety
/// `ranks` must hold `combos · tasks` doubles and `out_row` be writable.
#[no_mangle]
pub unsafe extern "C" fn mtlw_select_combo(
    ranks: *const f64,
    combos: usize,
    tasks: usize,
    target_column: usize,
    out_row: *mut usize,
) -> MtlwStatus {
    guard(|| {
        let rm = rank_matrix_arg(ranks, combos, tasks)?;
        if target_column >= tasks {
            return Err(fail(MtlwStatus::InvalidArgument, format!("column {target_column} out of range")));
        }
        let id = select_combo(&rm, TaskId(target_column as u32))?;
        *out_arg(out_row, "out_row")? = id.parse().expect("ids are row indices");
        Ok(())
    })
}

/// 1 when the two means differ by more than twice the larger standard
/// deviation, else 0.
#[no_mangle]
pub extern "C" fn mtlw_significant(mean_a: f64, std_a: f64, mean_b: f64, std_b: f64) -> i32 {
    i32::from(significant(mean_a, std_a, mean_b, std_b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = mtlw_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn null_out_pointer_reports_status_and_message() {
        let s = unsafe { mtlw_roc_auc([0.1, 0.9].as_ptr(), [0, 1].as_ptr(), 2, ptr::null_mut()) };
        assert_eq!(s, MtlwStatus::NullPointer);
        assert!(last_error().contains("out"));
    }

    #[test]
    fn auc_through_the_abi() {
        let mut auc = 0.0;
        let scores = [0.1, 0.4, 0.4, 0.8];
        let labels = [0u32, 0, 1, 1];
        let s = unsafe { mtlw_roc_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut auc) };
        assert_eq!(s, MtlwStatus::Ok);
        assert!(mtlw_last_error().is_null());
        // Positive pairs: (0.4 vs 0.1) win, (0.4 vs 0.4) tie, 0.8 wins twice.
        assert_eq!(auc, 3.5 / 4.0);
    }

    #[test]
    fn single_class_auc_is_invalid_argument() {
        let mut auc = 0.0;
        let s = unsafe { mtlw_roc_auc([0.1, 0.2].as_ptr(), [1, 1].as_ptr(), 2, &mut auc) };
        assert_eq!(s, MtlwStatus::InvalidArgument);
    }

    #[test]
    fn selection_ignores_the_target_column() {
        // Row 1 is best on column 0 only; excluding column 0 leaves row 0 best.
        let ranks = [2.0, 1.0, 1.0, 1.0, 2.0, 2.0];
        let mut row = usize::MAX;
        assert_eq!(unsafe { mtlw_select_combo(ranks.as_ptr(), 2, 3, 0, &mut row) }, MtlwStatus::Ok);
        assert_eq!(row, 0);
        let mut avg = [0.0; 2];
        assert_eq!(unsafe { mtlw_average_rank(ranks.as_ptr(), 2, 3, -1, avg.as_mut_ptr()) }, MtlwStatus::Ok);
        assert_eq!(avg, [4.0 / 3.0, 5.0 / 3.0]);
    }

    #[test]
    fn tied_rows_resolve_to_the_lower_index() {
        let ranks = [1.5, 1.5, 1.5, 1.5];
        let mut row = usize::MAX;
        assert_eq!(unsafe { mtlw_select_combo(ranks.as_ptr(), 2, 2, 1, &mut row) }, MtlwStatus::Ok);
        assert_eq!(row, 0);
    }

    #[test]
    fn significance_rule() {
        assert_eq!(mtlw_significant(0.9, 0.01, 0.8, 0.02), 1);
        assert_eq!(mtlw_significant(0.9, 0.05, 0.8, 0.02), 0);
    }

    #[test]
    fn missing_files_map_to_io() {
        let mut pool = ptr::null_mut();
        let s = unsafe { mtlw_pool_load(c"/nonexistent/pool".as_ptr(), &mut pool) };
        assert_eq!(s, MtlwStatus::Io);
        assert!(pool.is_null());
        let mut model = ptr::null_mut();
        let s = unsafe { mtlw_model_load(c"/nonexistent.mtlw".as_ptr(), &mut model) };
        assert_eq!(s, MtlwStatus::Io);
    }

    #[test]
    fn version_is_a_c_string() {
        let v = unsafe { CStr::from_ptr(mtlw_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
