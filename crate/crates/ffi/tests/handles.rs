use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mtl_workbench::model::MtlModel;
use mtl_workbench::nn::BnMode;
use mtl_workbench::pool::{generate_pool, save_pool, TaskPool};
use mtl_workbench::transfer::task_features;
use mtl_workbench::workbench::{save_checkpoint, CheckpointMeta, ExperimentConfig, PoolSource};
use mtl_workbench_ffi::*;

fn smoke_pool() -> (TaskPool, mtl_workbench::pool::PoolSpec) {
    let PoolSource::Synthetic(spec) = ExperimentConfig::smoke().pool else {
        unreachable!("the smoke config generates its pool")
    };
    (generate_pool(&spec).unwrap(), spec)
}

fn fixture(dir: &Path) -> (TaskPool, MtlModel<f32>, PathBuf, PathBuf) {
    let (pool, spec) = smoke_pool();
    let pool_dir = dir.join("pool");
    save_pool(&pool, Some(&spec), &pool_dir).unwrap();
    let trunk = mtl_workbench::trainer::trunk_config_for(&pool, "tiny").unwrap();
    let mut model = MtlModel::<f32>::new(&trunk, &pool.classes(), 3).unwrap();
    model.set_mode(BnMode::Eval);
    let ckpt = dir.join("m.mtlw");
    save_checkpoint(&model, &CheckpointMeta::for_model(&model, 3), &ckpt).unwrap();
    (pool, model, pool_dir, ckpt)
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn pool_and_model_round_trip_through_handles() {
    let dir = tempfile::tempdir().unwrap();
    let (pool, model, pool_dir, ckpt) = fixture(dir.path());

    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { mtlw_pool_load(c_path(&pool_dir).as_ptr(), &mut handle) }, MtlwStatus::Ok);
    let mut summary = MtlwPoolSummary::default();
    assert_eq!(unsafe { mtlw_pool_summary(handle, &mut summary) }, MtlwStatus::Ok);
    let s = pool.summary();
    assert_eq!(
        (summary.task_count, summary.class_total, summary.image_total),
        (s.task_count, s.class_total, s.image_total)
    );
    let mut info = MtlwTaskInfo::default();
    assert_eq!(unsafe { mtlw_pool_task_info(handle, 1, &mut info) }, MtlwStatus::Ok);
    assert_eq!((info.id, info.classes, info.samples), (pool.tasks[1].id.0, pool.tasks[1].classes, pool.tasks[1].len()));
    assert_eq!(unsafe { mtlw_pool_task_info(handle, 99, &mut info) }, MtlwStatus::InvalidArgument);

    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mtlw_model_load(c_path(&ckpt).as_ptr(), &mut m) }, MtlwStatus::Ok);
    let mut dim = 0;
    assert_eq!(unsafe { mtlw_model_feature_dim(m, &mut dim) }, MtlwStatus::Ok);
    assert_eq!(dim, model.feature_dim());

    let task = &pool.tasks[1];
    let mut too_small = vec![0.0f64; 3];
    assert_eq!(
        unsafe { mtlw_task_features(m, handle, 1, too_small.as_mut_ptr(), too_small.len()) },
        MtlwStatus::BufferTooSmall
    );
    let mut features = vec![0.0f64; task.len() * dim];
    assert_eq!(
        unsafe { mtlw_task_features(m, handle, 1, features.as_mut_ptr(), features.len()) },
        MtlwStatus::Ok
    );
    let indices: Vec<usize> = (0..task.len()).collect();
    let expected = task_features(&model, task, &indices, &pool.norm).unwrap();
    assert_eq!(features, expected);

    unsafe {
        mtlw_model_free(m);
        mtlw_pool_free(handle);
    }
}

#[test]
fn raw_image_extraction_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model, _, ckpt) = fixture(dir.path());
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mtlw_model_load(c_path(&ckpt).as_ptr(), &mut m) }, MtlwStatus::Ok);
    let (c, h, w) = model.trunk.config.input_size;
    let n = 5;
    let images: Vec<f32> = (0..n * c * h * w).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
    let mut out = vec![0.0f32; n * model.feature_dim()];
    assert_eq!(
        unsafe { mtlw_model_extract_features(m, images.as_ptr(), n, out.as_mut_ptr(), out.len()) },
        MtlwStatus::Ok
    );
    let t = mtl_workbench::autograd::Tensor::new(vec![n, c, h, w], images).unwrap();
    assert_eq!(out, model.extract_features(&t).unwrap().data());
    unsafe { mtlw_model_free(m) };
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.mtlw");
    std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
    let mut m = ptr::null_mut();
    let status = unsafe { mtlw_model_load(c_path(&path).as_ptr(), &mut m) };
    assert_eq!(status, MtlwStatus::Corrupt);
    assert!(m.is_null());
    let msg = unsafe { CStr::from_ptr(mtlw_last_error()) }.to_string_lossy();
    assert!(msg.contains("magic"), "{msg}");
}

/// Compiles a small C program against the generated header and the static
/// library, then runs it.
#[test]
fn header_compiles_and_links_from_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let lib = profile_dir.join("libmtl_workbench_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping", lib.display());
        return;
    }
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "mtl_workbench.h"

int main(void) {
    double scores[4] = {0.1, 0.4, 0.4, 0.8};
    uint32_t labels[4] = {0, 0, 1, 1};
    double auc = 0.0;
    if (mtlw_roc_auc(scores, labels, 4, &auc) != MTLW_STATUS_OK) return 1;
    double ranks[6] = {2.0, 1.0, 1.0, 1.0, 2.0, 2.0};
    size_t row = 9;
    if (mtlw_select_combo(ranks, 2, 3, 0, &row) != MTLW_STATUS_OK) return 2;
    MtlwPool *pool = NULL;
    MtlwStatus s = mtlw_pool_load("/nonexistent", &pool);
    if (s != MTLW_STATUS_IO || pool != NULL || mtlw_last_error() == NULL) return 3;
    printf("%s %.4f %zu\n", mtlw_version(), auc, row);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("probe");
    let status = Command::new(cc)
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "probe exited with {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.trim(), format!("{} 0.8750 0", env!("CARGO_PKG_VERSION")));
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc);
        }
    }
    Err(())
}
