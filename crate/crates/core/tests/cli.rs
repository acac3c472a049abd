use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mtlw(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtlw"))
        .current_dir(dir)
        .env_remove("MTLW_CONFIG")
        .env_remove("MTLW_OUT")
        .env_remove("MTLW_SEED")
        .env_remove("MTLW_RESUME")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("mtlw runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "mtlw failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn smoke_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let config = ok(&mtlw(dir.path(), &["default-config", "--smoke"]));
    fs::write(dir.path().join("smoke.json"), &config).unwrap();

    let summary = ok(&mtlw(dir.path(), &["--config", "smoke.json", "--out", "out", "pool", "build"]));
    let v: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(v["tasks"], 5);

    let ckpt = ok(&mtlw(
        dir.path(),
        &["--config", "smoke.json", "--out", "out", "train", "mtl", "--exclude", "small"],
    ));
    let ckpt = ckpt.trim();
    assert!(dir.path().join(ckpt).exists() || Path::new(ckpt).exists());

    let fe = ok(&mtlw(
        dir.path(),
        &["--config", "smoke.json", "--out", "out", "transfer", "fe", "--checkpoint", ckpt, "--task", "small"],
    ));
    assert!(fe.contains("score"), "{fe}");

    ok(&mtlw(dir.path(), &["--config", "smoke.json", "--out", "run", "run"]));
    assert!(dir.path().join("run/report/summary.csv").exists());
    let again = mtlw(dir.path(), &["--config", "smoke.json", "--out", "run", "run"]);
    assert!(!again.status.success(), "a second run without --resume must refuse");
    assert!(String::from_utf8_lossy(&again.stderr).contains("--resume"));
    let resumed = ok(&mtlw(dir.path(), &["--config", "smoke.json", "--out", "run", "--resume", "run"]));
    assert!(resumed.contains("0 records written"), "{resumed}");

    let report = ok(&mtlw(
        dir.path(),
        &["--config", "smoke.json", "--out", "run", "report", "--compare", "fine-tune:scratch"],
    ));
    assert!(report.contains("diff_fine-tune_vs_scratch.svg"), "{report}");
}

#[test]
fn unknown_task_is_a_clean_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("smoke.json"),
        ok(&mtlw(dir.path(), &["default-config", "--smoke"])),
    )
    .unwrap();
    let out = mtlw(
        dir.path(),
        &["--config", "smoke.json", "--out", "o", "baseline", "scratch", "--task", "nope", "--arch", "tiny"],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("nope"), "{err}");
}
