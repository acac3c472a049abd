use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mtl_workbench::eval::{average_rank, rank_matrix, select_combo};
use mtl_workbench::pool::{SplitKind, TaskId, TaskPool};
use mtl_workbench::seed::derive_seed;
use mtl_workbench::trainer::{train_mtl, trunk_config_for, HyperCombo, TrainSchedule, TrunkInit};
use mtl_workbench::transfer::{
    single_source_trunk, train_joint, train_scratch, transfer_feature_extraction, transfer_fine_tune, FeatureExtractionConfig,
    FineTuneConfig,
};
use mtl_workbench::workbench::store::score_table;
use mtl_workbench::workbench::{
    emit_report, enumerate_grid, load_checkpoint, materialize_pool, read_records, run_experiment, save_checkpoint, CheckpointMeta,
    ExperimentConfig, Protocol, RunOptions, DEFAULT_COMPARISONS,
};
use mtl_workbench::{Error, Result};

/// Multi-task pre-training and transfer-learning workbench.
#[derive(Parser)]
#[command(name = "mtlw", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults to the built-in desk config.
    #[arg(long, global = true, env = "MTLW_CONFIG")]
    config: Option<PathBuf>,
    /// Output directory for pools, checkpoints, results and reports.
    #[arg(long, global = true, env = "MTLW_OUT", default_value = "mtlw-out")]
    out: PathBuf,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true, env = "MTLW_JOBS")]
    jobs: Option<usize>,
    /// Run with this single seed instead of the config's seed list.
    #[arg(long, global = true, env = "MTLW_SEED")]
    seed: Option<u64>,
    /// Continue an existing results store instead of refusing to touch it.
    #[arg(long, global = true, env = "MTLW_RESUME")]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Task pool operations.
    Pool {
        #[command(subcommand)]
        command: PoolCommand,
    },
    /// Model training.
    Train {
        #[command(subcommand)]
        command: TrainCommand,
    },
    /// Leave-one-task-out model selection.
    Loto {
        #[command(subcommand)]
        command: LotoCommand,
    },
    /// Transfer a trained checkpoint to one task.
    Transfer {
        #[command(subcommand)]
        command: TransferCommand,
    },
    /// Baselines that do not transfer from an MTL trunk.
    Baseline {
        #[command(subcommand)]
        command: BaselineCommand,
    },
    /// Summary tables and difference charts from the results store.
    Report {
        /// Protocol pairs to chart, as `first:second`.
        #[arg(long = "compare")]
        compare: Vec<String>,
    },
    /// The whole pipeline: pool, LOTO, selection, protocols, report.
    Run,
    /// Print the built-in desk config as JSON.
    DefaultConfig {
        /// Print the seconds-long smoke config instead.
        #[arg(long)]
        smoke: bool,
    },
}

#[derive(Subcommand)]
enum PoolCommand {
    /// Generate (or load) the pool and print its summary.
    Build,
}

#[derive(Subcommand)]
enum TrainCommand {
    /// Multi-task training on the pool, optionally leaving tasks out.
    Mtl {
        /// Index into the enumerated grid.
        #[arg(long, default_value_t = 0)]
        combo: usize,
        /// Task names to leave out of training.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
    },
}

#[derive(Subcommand)]
enum LotoCommand {
    /// Run the LOTO stage into the results store.
    Run,
    /// Rank combos from the stored LOTO scores.
    Rank,
}

#[derive(Args)]
struct TransferArgs {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Target task name.
    #[arg(long)]
    task: String,
}

#[derive(Subcommand)]
enum TransferCommand {
    /// Linear SVM on frozen trunk features.
    Fe(TransferArgs),
    /// Fine-tune the whole network with a fresh head.
    Ft(TransferArgs),
}

#[derive(Subcommand)]
enum BaselineCommand {
    /// Train from a random initialization on the target only.
    Scratch {
        #[arg(long)]
        task: String,
        #[arg(long, default_value = "plain3")]
        arch: String,
    },
    /// Multi-task training with the targets in the pool.
    Joint {
        #[arg(long, value_delimiter = ',', required = true)]
        tasks: Vec<String>,
        #[arg(long, default_value_t = 0)]
        combo: usize,
    },
    /// Pre-train on one source task, then fine-tune on the target.
    SingleSource {
        #[arg(long)]
        source: String,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 0)]
        combo: usize,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::read(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = common.seed {
        config.seeds = vec![seed];
    }
    config.validate()?;
    Ok(config)
}

fn out_dir(common: &Common, config: &ExperimentConfig) -> PathBuf {
    // An explicit --out wins over the config's directory.
    let explicit = std::env::args().any(|a| a == "--out" || a.starts_with("--out=")) || std::env::var_os("MTLW_OUT").is_some();
    match (&config.out_dir, explicit) {
        (Some(dir), false) => dir.clone(),
        _ => common.out.clone(),
    }
}

fn pick_combo(config: &ExperimentConfig, index: usize) -> Result<HyperCombo> {
    let grid = enumerate_grid(&config.grid)?;
    let n = grid.len();
    grid.into_iter()
        .nth(index)
        .ok_or_else(|| Error::InvalidArgument(format!("combo index {index} is out of range, the grid has {n} combos")))
}

fn task_ids(pool: &TaskPool, names: &[String]) -> Result<Vec<TaskId>> {
    names.iter().map(|n| pool.task_by_name(n).map(|t| t.id)).collect()
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn first_seed(config: &ExperimentConfig) -> u64 {
    config.seeds[0]
}

fn schedule(config: &ExperimentConfig, stage: &str) -> TrainSchedule {
    TrainSchedule {
        seed: derive_seed(first_seed(config), stage),
        ..config.schedule.clone()
    }
}

fn fine_tune(config: &ExperimentConfig, stage: &str) -> FineTuneConfig {
    FineTuneConfig {
        seed: derive_seed(first_seed(config), stage),
        ..config.fine_tune.clone()
    }
}

fn execute(cli: Cli) -> Result<()> {
    let common = &cli.common;
    if let Command::DefaultConfig { smoke } = cli.command {
        let config = if smoke { ExperimentConfig::smoke() } else { ExperimentConfig::desk() };
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }
    let config = load_config(common)?;
    let out = out_dir(common, &config);
    fs::create_dir_all(&out).map_err(|e| Error::InvalidArgument(format!("cannot create {}: {e}", out.display())))?;
    match cli.command {
        Command::DefaultConfig { .. } => unreachable!(),
        Command::Pool {
            command: PoolCommand::Build,
        } => {
            let (pool, hash) = materialize_pool(&config, &out)?;
            let s = pool.summary();
            let tasks: Vec<_> = pool
                .tasks
                .iter()
                .map(|t| serde_json::json!({ "id": t.id.0, "name": t.name, "classes": t.classes, "samples": t.len(), "metric": t.metric }))
                .collect();
            print_json(&serde_json::json!({
                "tasks": s.task_count, "classes": s.class_total, "images": s.image_total,
                "pool_hash": hash, "task_list": tasks
            }))
        }
        Command::Train {
            command: TrainCommand::Mtl { combo, exclude },
        } => {
            let (pool, hash) = materialize_pool(&config, &out)?;
            let combo = pick_combo(&config, combo)?;
            let excluded: BTreeSet<TaskId> = task_ids(&pool, &exclude)?.into_iter().collect();
            let schedule = schedule(&config, &format!("cli/mtl/{}", combo.id()));
            let (model, log) = train_mtl(&pool.without(&excluded), &combo, &schedule, &TrunkInit::Random)?;
            let mut meta = CheckpointMeta::for_model(&model, first_seed(&config));
            meta.combo = Some(combo);
            meta.schedule = Some(schedule);
            meta.pool_hash = Some(hash);
            let path = out.join("mtl.mtlw");
            save_checkpoint(&model, &meta, &path)?;
            log.write_jsonl(&out.join("mtl.log.jsonl"))?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Loto { command: LotoCommand::Run } => {
            let mut c = config.clone();
            c.protocols = vec![Protocol::Loto];
            let summary = run_experiment(&c, &RunOptions { out_dir: out, resume: common.resume })?;
            println!("{} records written, {} in store", summary.records_written, summary.records_total);
            report_failures(&summary.failures);
            Ok(())
        }
        Command::Loto { command: LotoCommand::Rank } => {
            let records = read_records(&out.join("results.jsonl"))?;
            let rm = rank_matrix(&score_table(&records, Protocol::Loto)?)?;
            let path = out.join("rank_matrix.csv");
            fs::write(&path, rm.to_csv()).map_err(|e| Error::InvalidArgument(format!("cannot write {}: {e}", path.display())))?;
            let avg = average_rank(&rm, None)?;
            let mut order: Vec<usize> = (0..rm.combos.len()).collect();
            order.sort_by(|&a, &b| avg[a].total_cmp(&avg[b]).then(rm.combos[a].cmp(&rm.combos[b])));
            for i in order {
                println!("{:>8.3}  {}", avg[i], rm.combos[i]);
            }
            if rm.combos.len() > 1 {
                for &t in &rm.tasks {
                    println!("task {t}: {}", select_combo(&rm, t)?);
                }
            }
            Ok(())
        }
        Command::Transfer { command } => {
            let (pool, _) = materialize_pool(&config, &out)?;
            let (args, fe) = match &command {
                TransferCommand::Fe(a) => (a, true),
                TransferCommand::Ft(a) => (a, false),
            };
            let (model, _) = load_checkpoint(&args.checkpoint)?;
            let task = pool.task_by_name(&args.task)?;
            if fe {
                let cfg = FeatureExtractionConfig {
                    svm: config.svm.clone(),
                    recalibrate_bn: config.recalibrate_bn,
                    seed: derive_seed(first_seed(&config), &format!("cli/fe/{}", task.id.0)),
                };
                let r = transfer_feature_extraction(&model, task, &pool.norm, SplitKind::Train, SplitKind::Test, &cfg)?;
                print_json(&serde_json::json!({ "task": task.name, "metric": task.metric, "score": r.score, "best_c": r.best_c }))
            } else {
                let cfg = fine_tune(&config, &format!("cli/ft/{}", task.id.0));
                let r = transfer_fine_tune(&model, task, &pool.norm, &cfg)?;
                print_json(&serde_json::json!({
                    "task": task.name, "metric": task.metric, "score": r.score,
                    "val_score": r.val_score, "best_lr": r.best_lr, "best_epoch": r.best_epoch
                }))
            }
        }
        Command::Baseline { command } => {
            let (pool, _) = materialize_pool(&config, &out)?;
            match command {
                BaselineCommand::Scratch { task, arch } => {
                    let task = pool.task_by_name(&task)?;
                    let trunk = trunk_config_for(&pool, &arch)?;
                    let r = train_scratch(&trunk, task, &pool.norm, &fine_tune(&config, &format!("cli/scratch/{}", task.id.0)))?;
                    print_json(&serde_json::json!({ "task": task.name, "score": r.score, "best_lr": r.best_lr }))
                }
                BaselineCommand::Joint { tasks, combo } => {
                    let combo = pick_combo(&config, combo)?;
                    let targets = task_ids(&pool, &tasks)?;
                    let sched = schedule(&config, &format!("cli/joint/{}", combo.id()));
                    let results = train_joint(&pool, &combo, &sched, &targets, config.joint_eval_every)?;
                    print_json(&serde_json::to_value(results)?)
                }
                BaselineCommand::SingleSource { source, task, combo } => {
                    let combo = pick_combo(&config, combo)?;
                    let source = pool.task_by_name(&source)?.id;
                    let task = pool.task_by_name(&task)?;
                    let sched = schedule(&config, &format!("cli/single/{}", source.0));
                    let trunk = single_source_trunk(&pool, source, &combo, &sched)?;
                    let r = transfer_fine_tune(&trunk, task, &pool.norm, &fine_tune(&config, &format!("cli/single-ft/{}", task.id.0)))?;
                    print_json(&serde_json::json!({ "task": task.name, "score": r.score, "best_lr": r.best_lr }))
                }
            }
        }
        Command::Report { compare } => {
            let records = read_records(&out.join("results.jsonl"))?;
            let pairs: Vec<(String, String)> = if compare.is_empty() {
                DEFAULT_COMPARISONS.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
            } else {
                compare
                    .iter()
                    .map(|p| {
                        p.split_once(':')
                            .map(|(a, b)| (a.to_string(), b.to_string()))
                            .ok_or_else(|| Error::InvalidArgument(format!("comparison `{p}` is not of the form first:second")))
                    })
                    .collect::<Result<_>>()?
            };
            let refs: Vec<(&str, &str)> = pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
            let files = emit_report(&records, &out.join("report"), &refs)?;
            print_report(&files.summary_csv, &files.comparisons);
            Ok(())
        }
        Command::Run => {
            let summary = run_experiment(&config, &RunOptions { out_dir: out, resume: common.resume })?;
            info!("selected combos: {:?}", summary.selected);
            println!("{} records written, {} in store", summary.records_written, summary.records_total);
            print_report(&summary.report.summary_csv, &summary.report.comparisons);
            report_failures(&summary.failures);
            Ok(())
        }
    }
}

fn print_report(summary: &Path, comparisons: &[(PathBuf, PathBuf)]) {
    println!("{}", summary.display());
    for (csv, svg) in comparisons {
        println!("{}\n{}", csv.display(), svg.display());
    }
}

fn report_failures(failures: &[mtl_workbench::eval::RunFailure]) {
    for f in failures {
        eprintln!("failed: combo {} tasks {:?} seed {}: {}", f.combo, f.tasks, f.seed, f.message);
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(jobs) = cli.common.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            eprintln!("error: cannot start {jobs} worker threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
