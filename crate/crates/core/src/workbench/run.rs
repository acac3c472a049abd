use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use super::config::{enumerate_grid, ExperimentConfig, PoolSource, Protocol};
use super::report::{emit_report, ReportFiles, DEFAULT_COMPARISONS};
use super::store::{append_failures, score_table, unix_millis, RecordKey, ResultRecord, ResultStore, RECORD_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::eval::{average_rank, leave_out_sets, loto_jobs, rank_matrix, run_loto_job, select_combo, LotoJob, LotoSettings, RunFailure};
use crate::model::MtlModel;
use crate::pool::manifest::hex;
use crate::pool::{generate_pool, load_pool, save_pool, SplitKind, TaskId, TaskPool};
use crate::seed::derive_seed;
use crate::trainer::{train_mtl, trunk_config_for, HyperCombo, TrainSchedule, TrunkInit};
use crate::transfer::{
    single_source_trunk, train_joint, train_scratch, transfer_feature_extraction, transfer_fine_tune, FeatureExtractionConfig,
    FineTuneConfig,
};

/// Combo id recorded for protocols that do not use the grid.
pub const SCRATCH_COMBO: &str = "scratch";

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub resume: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub records_written: usize,
    pub records_total: usize,
    pub failures: Vec<RunFailure>,
    pub selected: BTreeMap<TaskId, String>,
    pub report: ReportFiles,
}

/// Loads or generates the pool. Generated pools are saved under
/// `out_dir/pool` so later stages and reruns read identical data.
pub fn materialize_pool(config: &ExperimentConfig, out_dir: &Path) -> Result<(TaskPool, String)> {
    match &config.pool {
        PoolSource::Manifest(path) => {
            let (pool, manifest) = load_pool(path)?;
            Ok((pool, manifest.hash()))
        }
        PoolSource::Synthetic(spec) => {
            let dir = out_dir.join("pool");
            if dir.join("manifest.json").exists() {
                let (pool, manifest) = load_pool(&dir)?;
                if manifest.generator.as_ref() == Some(spec) {
                    return Ok((pool, manifest.hash()));
                }
                return Err(Error::InvalidConfig(format!(
                    "{} holds a pool generated from a different spec",
                    dir.display()
                )));
            }
            let pool = generate_pool(spec)?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let manifest = save_pool(&pool, Some(spec), &dir)?;
            Ok((pool, manifest.hash()))
        }
    }
}

fn resolve_targets(config: &ExperimentConfig, pool: &TaskPool) -> Result<Vec<TaskId>> {
    match &config.targets {
        None => Ok(pool.tasks.iter().map(|t| t.id).collect()),
        Some(names) => names.iter().map(|n| pool.task_by_name(n).map(|t| t.id)).collect(),
    }
}

fn short_hash(s: &str) -> String {
    hex(&Sha256::digest(s.as_bytes()))[..12].to_string()
}

/// Work that produces records; every unit knows which keys it will write
/// so completed units are skipped on resume.
#[derive(Clone, Debug)]
enum Unit {
    Loto(LotoJob),
    /// MTL trunk on the pool minus `left_out`, then FE and/or FT on `targets`.
    Transfer {
        left_out: Vec<TaskId>,
        targets: Vec<TaskId>,
        combo: HyperCombo,
        seed: u64,
    },
    Scratch {
        target: TaskId,
        arch: String,
        seed: u64,
    },
    Joint {
        targets: Vec<TaskId>,
        combo: HyperCombo,
        seed: u64,
    },
    SingleSource {
        source: TaskId,
        targets: Vec<TaskId>,
        combo: HyperCombo,
        seed: u64,
    },
}

struct Runner<'a> {
    config: &'a ExperimentConfig,
    pool: &'a TaskPool,
    pool_hash: String,
    config_hash: String,
    store: &'a ResultStore,
    checkpoints: PathBuf,
}

impl Runner<'_> {
    fn keys(&self, unit: &Unit) -> Vec<RecordKey> {
        let key = |protocol, combo_id: String, task, seed| RecordKey {
            protocol,
            combo_id,
            task,
            seed,
        };
        match unit {
            Unit::Loto(job) => job.tasks.iter().map(|&t| key(Protocol::Loto, job.combo.id(), t, job.seed)).collect(),
            Unit::Transfer {
                targets, combo, seed, ..
            } => {
                let mut out = Vec::new();
                for &t in targets {
                    for p in [Protocol::FeatureExtraction, Protocol::FineTune] {
                        if self.config.protocols.contains(&p) {
                            out.push(key(p, combo.id(), t, *seed));
                        }
                    }
                }
                out
            }
            Unit::Scratch { target, seed, .. } => vec![key(Protocol::Scratch, SCRATCH_COMBO.into(), *target, *seed)],
            Unit::Joint { targets, combo, seed } => {
                targets.iter().map(|&t| key(Protocol::Joint, combo.id(), t, *seed)).collect()
            }
            Unit::SingleSource {
                targets, combo, seed, ..
            } => targets.iter().map(|&t| key(Protocol::SingleSource, combo.id(), t, *seed)).collect(),
        }
    }

    fn done(&self, unit: &Unit) -> bool {
        self.keys(unit).iter().all(|k| self.store.contains(k))
    }

    fn record(&self, key: RecordKey, score: f64, started_at: u64, extra: serde_json::Value) -> Result<ResultRecord> {
        let task = self.pool.task(key.task)?;
        Ok(ResultRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            protocol: key.protocol,
            combo_id: key.combo_id,
            target_task: key.task,
            task_name: task.name.clone(),
            seed: key.seed,
            metric_kind: task.metric,
            score,
            started_at,
            finished_at: unix_millis(),
            config_hash: self.config_hash.clone(),
            extra,
        })
    }

    fn schedule(&self, seed: u64, stage: &str) -> TrainSchedule {
        TrainSchedule {
            seed: derive_seed(seed, stage),
            ..self.config.schedule.clone()
        }
    }

    fn fine_tune(&self, seed: u64, stage: &str) -> FineTuneConfig {
        FineTuneConfig {
            seed: derive_seed(seed, stage),
            ..self.config.fine_tune.clone()
        }
    }

    /// Trains, or reloads from its checkpoint, an MTL model.
    fn mtl_model(&self, pool: &TaskPool, name: &str, combo: &HyperCombo, schedule: &TrainSchedule, seed: u64) -> Result<MtlModel<f32>> {
        let path = self.checkpoints.join(format!("{name}.mtlw"));
        if path.exists() {
            let (model, meta) = load_checkpoint(&path)?;
            if meta.combo.as_ref() == Some(combo) && meta.schedule.as_ref() == Some(schedule) && meta.pool_hash.as_deref() == Some(&self.pool_hash) {
                return Ok(model);
            }
        }
        let (model, log) = train_mtl(pool, combo, schedule, &TrunkInit::Random)?;
        let mut meta = CheckpointMeta::for_model(&model, seed);
        meta.combo = Some(combo.clone());
        meta.schedule = Some(schedule.clone());
        meta.pool_hash = Some(self.pool_hash.clone());
        save_checkpoint(&model, &meta, &path)?;
        log.write_jsonl(&self.checkpoints.join(format!("{name}.log.jsonl")))?;
        Ok(model)
    }

    fn run_unit(&self, unit: &Unit) -> Result<Vec<ResultRecord>> {
        let started = unix_millis();
        let mut out = Vec::new();
        match unit {
            Unit::Loto(job) => {
                let settings = LotoSettings {
                    schedule: self.config.schedule.clone(),
                    feature_extraction: FeatureExtractionConfig {
                        svm: self.config.svm.clone(),
                        recalibrate_bn: self.config.recalibrate_bn,
                        seed: 0,
                    },
                };
                for (task, _, score) in run_loto_job(self.pool, job, &settings)? {
                    let key = RecordKey {
                        protocol: Protocol::Loto,
                        combo_id: job.combo.id(),
                        task,
                        seed: job.seed,
                    };
                    out.push(self.record(key, score, started, serde_json::Value::Null)?);
                }
            }
            Unit::Transfer {
                left_out,
                targets,
                combo,
                seed,
            } => {
                let set_key = left_out.iter().map(|t| t.0.to_string()).collect::<Vec<_>>().join("+");
                let stage = format!("run/mtl/{set_key}/{}", combo.id());
                let schedule = self.schedule(*seed, &stage);
                let excluded: BTreeSet<TaskId> = left_out.iter().copied().collect();
                let name = format!("mtl_out{set_key}_{}_seed{seed}", short_hash(&combo.id()));
                let model = self.mtl_model(&self.pool.without(&excluded), &name, combo, &schedule, *seed)?;
                for &t in targets {
                    let task = self.pool.task(t)?;
                    let key = |protocol| RecordKey {
                        protocol,
                        combo_id: combo.id(),
                        task: t,
                        seed: *seed,
                    };
                    if self.config.protocols.contains(&Protocol::FeatureExtraction) {
                        let fe = FeatureExtractionConfig {
                            svm: self.config.svm.clone(),
                            recalibrate_bn: self.config.recalibrate_bn,
                            seed: derive_seed(*seed, &format!("run/fe/{}", t.0)),
                        };
                        let r = transfer_feature_extraction(&model, task, &self.pool.norm, SplitKind::Train, SplitKind::Test, &fe)?;
                        let extra = serde_json::json!({ "best_c": r.best_c });
                        out.push(self.record(key(Protocol::FeatureExtraction), r.score, started, extra)?);
                    }
                    if self.config.protocols.contains(&Protocol::FineTune) {
                        let ft = self.fine_tune(*seed, &format!("run/ft/{}", t.0));
                        let r = transfer_fine_tune(&model, task, &self.pool.norm, &ft)?;
                        let extra = serde_json::json!({
                            "best_lr": r.best_lr, "best_epoch": r.best_epoch, "val_score": r.val_score
                        });
                        out.push(self.record(key(Protocol::FineTune), r.score, started, extra)?);
                    }
                }
            }
            Unit::Scratch { target, arch, seed } => {
                let task = self.pool.task(*target)?;
                let trunk = trunk_config_for(self.pool, arch)?;
                let ft = self.fine_tune(*seed, &format!("run/scratch/{}", target.0));
                let r = train_scratch(&trunk, task, &self.pool.norm, &ft)?;
                let key = RecordKey {
                    protocol: Protocol::Scratch,
                    combo_id: SCRATCH_COMBO.into(),
                    task: *target,
                    seed: *seed,
                };
                let extra = serde_json::json!({ "arch": arch, "best_lr": r.best_lr, "best_epoch": r.best_epoch });
                out.push(self.record(key, r.score, started, extra)?);
            }
            Unit::Joint { targets, combo, seed } => {
                let schedule = self.schedule(*seed, &format!("run/joint/{}", combo.id()));
                for r in train_joint(self.pool, combo, &schedule, targets, self.config.joint_eval_every)? {
                    let key = RecordKey {
                        protocol: Protocol::Joint,
                        combo_id: combo.id(),
                        task: r.task,
                        seed: *seed,
                    };
                    let extra = serde_json::json!({ "best_iteration": r.best_iteration, "val_score": r.val_score });
                    out.push(self.record(key, r.score, started, extra)?);
                }
            }
            Unit::SingleSource {
                source,
                targets,
                combo,
                seed,
            } => {
                let schedule = self.schedule(*seed, &format!("run/single/{}/{}", source.0, combo.id()));
                let trunk = single_source_trunk(self.pool, *source, combo, &schedule)?;
                for &t in targets {
                    let task = self.pool.task(t)?;
                    let ft = self.fine_tune(*seed, &format!("run/single-ft/{}", t.0));
                    let r = transfer_fine_tune(&trunk, task, &self.pool.norm, &ft)?;
                    let key = RecordKey {
                        protocol: Protocol::SingleSource,
                        combo_id: combo.id(),
                        task: t,
                        seed: *seed,
                    };
                    let extra = serde_json::json!({ "source": source.0, "best_lr": r.best_lr });
                    out.push(self.record(key, r.score, started, extra)?);
                }
            }
        }
        Ok(out)
    }

    /// Runs pending units in parallel chunks, appending each chunk's records
    /// in unit order so the store layout does not depend on scheduling.
    fn execute(&self, units: &[Unit], failures: &mut Vec<RunFailure>) -> Result<usize> {
        let pending: Vec<&Unit> = units.iter().filter(|u| !self.done(u)).collect();
        info!("{} of {} units pending", pending.len(), units.len());
        let chunk = rayon::current_num_threads().max(1);
        let mut written = 0;
        for part in pending.chunks(chunk) {
            let results: Vec<Result<Vec<ResultRecord>>> = part.par_iter().map(|u| self.run_unit(u)).collect();
            for (unit, result) in part.iter().zip(results) {
                match result {
                    Ok(records) => {
                        for r in records {
                            written += usize::from(self.store.append(r)?);
                        }
                    }
                    Err(e) => {
                        let keys = self.keys(unit);
                        failures.push(RunFailure {
                            combo: keys.first().map(|k| k.combo_id.clone()).unwrap_or_default(),
                            tasks: keys.iter().map(|k| k.task).collect::<BTreeSet<_>>().into_iter().collect(),
                            seed: keys.first().map_or(0, |k| k.seed),
                            message: format!("{unit:?}: {e}"),
                        });
                    }
                }
            }
        }
        Ok(written)
    }
}

/// Runs the configured pipeline: pool, LOTO, selection, transfer protocols
/// and baselines, report. Completed cells found in the results store are
/// skipped, so an interrupted run can be resumed with `resume`.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<RunSummary> {
    config.validate()?;
    let out = &options.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_hash = config.hash();
    let config_copy = out.join("config.json");
    if !config_copy.exists() {
        config.write(&config_copy)?;
    }
    let store = ResultStore::open(&out.join("results.jsonl"), &config_hash, options.resume)?;
    let checkpoints = out.join("checkpoints");
    fs::create_dir_all(&checkpoints).map_err(|e| Error::io(&checkpoints, e))?;
    let (pool, pool_hash) = materialize_pool(config, out)?;
    let targets = resolve_targets(config, &pool)?;
    let target_set: BTreeSet<TaskId> = targets.iter().copied().collect();
    let grid = enumerate_grid(&config.grid)?;
    let runner = Runner {
        config,
        pool: &pool,
        pool_hash,
        config_hash,
        store: &store,
        checkpoints,
    };
    let mut failures = Vec::new();
    let mut written = 0;

    // Stage 1: leave-one-task-out validation scores for every combo.
    let plan = leave_out_sets(&pool).restricted_to(&target_set);
    if config.protocols.contains(&Protocol::Loto) {
        let units: Vec<Unit> = loto_jobs(&plan, &grid, &config.seeds).into_iter().map(Unit::Loto).collect();
        written += runner.execute(&units, &mut failures)?;
    }

    // Stage 2: per-target combo, chosen with the target's own column excluded.
    let mut selected: BTreeMap<TaskId, HyperCombo> = BTreeMap::new();
    let overall: HyperCombo;
    if grid.len() == 1 {
        overall = grid[0].clone();
        for &t in &targets {
            selected.insert(t, grid[0].clone());
        }
    } else {
        if !config.protocols.contains(&Protocol::Loto) {
            return Err(Error::InvalidConfig(
                "a grid with several combos needs the loto protocol to select among them".into(),
            ));
        }
        let table = score_table(&store.records(), Protocol::Loto)?;
        let rm = rank_matrix(&table)?;
        let by_id: BTreeMap<String, &HyperCombo> = grid.iter().map(|c| (c.id(), c)).collect();
        for &t in &targets {
            let id = select_combo(&rm, t)?;
            selected.insert(t, by_id[&id].clone());
        }
        let avg = average_rank(&rm, None)?;
        let best = (0..rm.combos.len())
            .min_by(|&a, &b| avg[a].total_cmp(&avg[b]).then(rm.combos[a].cmp(&rm.combos[b])))
            .expect("non-empty rank matrix");
        overall = by_id[&rm.combos[best]].clone();
    }
    for (t, c) in &selected {
        info!("task {}: selected {}", pool.task(*t)?.name, c.id());
    }

    // Stage 3: transfer protocols and baselines on the test splits.
    let mut units = Vec::new();
    let wants = |p| config.protocols.contains(&p);
    if wants(Protocol::FeatureExtraction) || wants(Protocol::FineTune) {
        for &seed in &config.seeds {
            for set in &plan.sets {
                let mut by_combo: BTreeMap<String, (HyperCombo, Vec<TaskId>)> = BTreeMap::new();
                for t in set.iter().filter(|t| target_set.contains(t)) {
                    let c = &selected[t];
                    by_combo.entry(c.id()).or_insert_with(|| (c.clone(), Vec::new())).1.push(*t);
                }
                for (_, (combo, ts)) in by_combo {
                    units.push(Unit::Transfer {
                        left_out: set.clone(),
                        targets: ts,
                        combo,
                        seed,
                    });
                }
            }
        }
    }
    if wants(Protocol::Scratch) {
        for &seed in &config.seeds {
            for &t in &targets {
                units.push(Unit::Scratch {
                    target: t,
                    arch: selected[&t].trunk_arch.clone(),
                    seed,
                });
            }
        }
    }
    if wants(Protocol::Joint) {
        for &seed in &config.seeds {
            units.push(Unit::Joint {
                targets: targets.clone(),
                combo: overall.clone(),
                seed,
            });
        }
    }
    if wants(Protocol::SingleSource) {
        // The largest non-target task plays the generic source.
        let source = pool
            .tasks
            .iter()
            .filter(|t| !target_set.contains(&t.id))
            .max_by(|a, b| a.len().cmp(&b.len()).then(b.id.cmp(&a.id)))
            .ok_or_else(|| Error::InvalidConfig("single-source needs a task outside the targets".into()))?
            .id;
        for &seed in &config.seeds {
            units.push(Unit::SingleSource {
                source,
                targets: targets.clone(),
                combo: overall.clone(),
                seed,
            });
        }
    }
    written += runner.execute(&units, &mut failures)?;
    append_failures(&out.join("failures.jsonl"), &failures)?;

    let records = store.records();
    let report = emit_report(&records, &out.join("report"), &DEFAULT_COMPARISONS)?;
    Ok(RunSummary {
        records_written: written,
        records_total: records.len(),
        failures,
        selected: selected.into_iter().map(|(t, c)| (t, c.id())).collect(),
        report,
    })
}
