use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::svm::{tune_svm, SvmConfig};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::eval::metric::metric;
use crate::model::{Batch, MtlModel};
use crate::nn::{BnMode, TrunkConfig};
use crate::pool::{NormStats, SampleId, SplitKind, Task, TaskId, TaskPool};
use crate::seed::{derive_seed, stream};
use crate::trainer::{load_images, train_step, HyperCombo, MtlTrainer, TrainSchedule, TrunkInit};

/// Images are pushed through the trunk in chunks of this many.
const CHUNK: usize = 256;

fn clean_images(task: &Task, indices: &[usize], norm: &NormStats) -> Result<Tensor<f32>> {
    load_images::<ChaCha8Rng>(task, indices, norm, None)
}

/// Trunk features of the given samples as `f64`, row-major `n × f_s`.
pub fn task_features(model: &MtlModel<f32>, task: &Task, indices: &[usize], norm: &NormStats) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len() * model.feature_dim());
    for chunk in indices.chunks(CHUNK) {
        let f = model.extract_features(&clean_images(task, chunk, norm)?)?;
        out.extend(f.data().iter().map(|&v| f64::from(v)));
    }
    Ok(out)
}

/// Head probabilities for the given samples, row-major `n × C`.
fn head_scores(model: &MtlModel<f32>, task: &Task, indices: &[usize], norm: &NormStats) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len() * task.classes);
    for chunk in indices.chunks(CHUNK) {
        let p = model.predict(task.id, &clean_images(task, chunk, norm)?)?;
        out.extend(p.data().iter().map(|&v| f64::from(v)));
    }
    Ok(out)
}

/// Task metric of `model`'s own head for `task` on one split.
pub fn evaluate_head(model: &MtlModel<f32>, task: &Task, split: SplitKind, norm: &NormStats) -> Result<f64> {
    let indices = task.splits.get(split);
    let scores = head_scores(model, task, indices, norm)?;
    let labels: Vec<usize> = indices.iter().map(|&i| task.labels[i]).collect();
    metric(&scores, task.classes, &labels, task.metric)
}

/// Re-estimates batch-norm running statistics from `stream` without touching
/// any weight.
pub fn recalibrate_bn(model: &MtlModel<f32>, stream: &[Tensor<f32>]) -> Result<MtlModel<f32>> {
    model.recalibrate_bn(stream)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractionConfig {
    pub svm: SvmConfig,
    /// Re-estimate batch-norm statistics on the fitting split first.
    #[serde(default)]
    pub recalibrate_bn: bool,
    pub seed: u64,
}

impl FeatureExtractionConfig {
    pub fn new(seed: u64) -> Self {
        FeatureExtractionConfig {
            svm: SvmConfig::default(),
            recalibrate_bn: false,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractionResult {
    pub score: f64,
    pub best_c: f64,
}

/// Freezes the trunk, tunes and fits a linear SVM on the `fit` split's
/// features and scores the `score` split with the task's metric.
pub fn transfer_feature_extraction(
    model: &MtlModel<f32>,
    task: &Task,
    norm: &NormStats,
    fit: SplitKind,
    score: SplitKind,
    config: &FeatureExtractionConfig,
) -> Result<FeatureExtractionResult> {
    if fit == score {
        return Err(Error::InvalidArgument("fitting and scoring splits must differ".into()));
    }
    let mut trunk = model.trunk_copy();
    trunk.set_mode(BnMode::Eval);
    let fit_idx = task.splits.get(fit);
    let score_idx = task.splits.get(score);
    if config.recalibrate_bn {
        let stream = fit_idx
            .chunks(CHUNK)
            .map(|c| clean_images(task, c, norm))
            .collect::<Result<Vec<_>>>()?;
        trunk = trunk.recalibrate_bn(&stream)?;
    }
    let fs = trunk.feature_dim();
    let x_fit = task_features(&trunk, task, fit_idx, norm)?;
    let y_fit: Vec<usize> = fit_idx.iter().map(|&i| task.labels[i]).collect();
    let g_fit: Vec<u32> = fit_idx.iter().map(|&i| task.groups[i]).collect();
    let tuning = tune_svm(
        &x_fit,
        fs,
        &y_fit,
        task.classes,
        &g_fit,
        task.metric,
        &config.svm,
        derive_seed(config.seed, &format!("fe/{}", task.id.0)),
    )?;
    let x_score = task_features(&trunk, task, score_idx, norm)?;
    let y_score: Vec<usize> = score_idx.iter().map(|&i| task.labels[i]).collect();
    let s = metric(&tuning.model.decision_function(&x_score), task.classes, &y_score, task.metric)?;
    Ok(FeatureExtractionResult {
        score: s,
        best_c: tuning.best_c,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl FineTuneConfig {
    /// 100 epochs, `lr ∈ {1e-3, 1e-4, 1e-5, 1e-6}`, batches of 64, momentum 0.9.
    pub fn full_scale(seed: u64) -> Self {
        FineTuneConfig {
            epochs: 100,
            lr_grid: vec![1e-3, 1e-4, 1e-5, 1e-6],
            batch_size: 64,
            momentum: 0.9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("fine-tuning needs at least one epoch".into()));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidConfig("learning-rate grid must be non-empty and positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("fine-tuning batches need at least 2 samples".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneRun {
    pub lr: f64,
    /// Validation metric after each completed epoch.
    pub val_scores: Vec<f64>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneResult {
    /// Test metric of the selected snapshot.
    pub score: f64,
    pub val_score: f64,
    pub best_lr: f64,
    /// 1-based epoch of the selected snapshot.
    pub best_epoch: usize,
    pub runs: Vec<FineTuneRun>,
}

/// Trains the whole network of `start` (trunk plus `task`'s head) on the
/// training split for every learning rate in the grid, keeps the (lr, epoch)
/// snapshot with the best validation metric (earliest wins ties) and reports
/// its test metric.
pub fn fine_tune_from(start: &MtlModel<f32>, task: &Task, norm: &NormStats, config: &FineTuneConfig) -> Result<FineTuneResult> {
    config.validate()?;
    start.head_param_ids(task.id)?;
    let train = task.splits.get(SplitKind::Train);
    let val = task.splits.get(SplitKind::Val);
    let val_labels: Vec<usize> = val.iter().map(|&i| task.labels[i]).collect();
    let mut best: Option<(f64, f64, usize, MtlModel<f32>)> = None;
    let mut runs = Vec::with_capacity(config.lr_grid.len());
    for (li, &lr) in config.lr_grid.iter().enumerate() {
        let mut model = start.clone();
        let mut rng = stream(config.seed, &format!("ft/{}/lr{li}", task.id.0));
        let mut order = train.to_vec();
        let mut run = FineTuneRun {
            lr,
            val_scores: Vec::with_capacity(config.epochs),
            diverged: false,
        };
        'epochs: for epoch in 1..=config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size) {
                // A lone trailing sample would make batch statistics degenerate.
                if chunk.len() < 2 {
                    continue;
                }
                let batch = Batch {
                    images: load_images(task, chunk, norm, Some(&mut rng))?,
                    task_of: vec![task.id; chunk.len()],
                    labels: chunk.iter().map(|&i| task.labels[i]).collect(),
                    sample_ids: chunk.iter().map(|&index| SampleId { task: task.id, index }).collect(),
                };
                let loss = train_step(&mut model, &batch, Some(lr), lr, config.momentum)?;
                if !loss.is_finite() {
                    run.diverged = true;
                    break 'epochs;
                }
            }
            model.set_mode(BnMode::Eval);
            let scores = head_scores(&model, task, val, norm)?;
            let v = metric(&scores, task.classes, &val_labels, task.metric)?;
            run.val_scores.push(v);
            if best.as_ref().map_or(true, |(b, ..)| v > *b) {
                best = Some((v, lr, epoch, model.clone()));
            }
        }
        runs.push(run);
    }
    let Some((val_score, best_lr, best_epoch, snapshot)) = best else {
        return Err(Error::AllRunsDiverged { runs: runs.len() });
    };
    let score = evaluate_head(&snapshot, task, SplitKind::Test, norm)?;
    Ok(FineTuneResult {
        score,
        val_score,
        best_lr,
        best_epoch,
        runs,
    })
}

/// Fine-tunes a copy of `trunk` with a freshly initialized head for `task`.
pub fn transfer_fine_tune(trunk: &MtlModel<f32>, task: &Task, norm: &NormStats, config: &FineTuneConfig) -> Result<FineTuneResult> {
    let start = trunk.attach_target_head(task.id, task.classes, derive_seed(config.seed, "ft/head"))?;
    fine_tune_from(&start, task, norm, config)
}

/// The fine-tuning protocol from a randomly initialized trunk.
pub fn train_scratch(trunk_config: &TrunkConfig, task: &Task, norm: &NormStats, config: &FineTuneConfig) -> Result<FineTuneResult> {
    let trunk = MtlModel::<f32>::build_trunk(trunk_config, derive_seed(config.seed, "scratch/trunk"))?;
    transfer_fine_tune(&trunk, task, norm, config)
}

/// Trunk pre-trained on a single generic source task of `pool`.
pub fn single_source_trunk(
    pool: &TaskPool,
    source: TaskId,
    combo: &HyperCombo,
    schedule: &TrainSchedule,
) -> Result<MtlModel<f32>> {
    pool.task(source)?;
    let others: BTreeSet<TaskId> = pool.tasks.iter().map(|t| t.id).filter(|&t| t != source).collect();
    let single = pool.without(&others);
    let (model, _) = MtlTrainer::new(&single, combo, schedule, &TrunkInit::Random)?.run()?;
    Ok(model.trunk_copy())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointResult {
    pub task: TaskId,
    /// Test metric of the selected snapshot.
    pub score: f64,
    pub val_score: f64,
    /// Number of completed iterations at the selected snapshot.
    pub best_iteration: usize,
}

/// Multi-task training on a pool that includes the targets. Every
/// `eval_every` iterations (and at the end) each target's own head is scored
/// on its validation split; the best snapshot per target is scored on test.
/// Only training splits ever enter a batch, which is audited.
pub fn train_joint(
    pool: &TaskPool,
    combo: &HyperCombo,
    schedule: &TrainSchedule,
    targets: &[TaskId],
    eval_every: usize,
) -> Result<Vec<JointResult>> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("joint training needs at least one target".into()));
    }
    if eval_every == 0 {
        return Err(Error::InvalidArgument("evaluation interval must be positive".into()));
    }
    let target_tasks = targets.iter().map(|&t| pool.task(t)).collect::<Result<Vec<_>>>()?;
    let mut trainer = MtlTrainer::new(pool, combo, schedule, &TrunkInit::Random)?.audit_samples();
    let mut best: BTreeMap<TaskId, (f64, usize, MtlModel<f32>)> = BTreeMap::new();
    let mut evaluate = |trainer: &MtlTrainer| -> Result<()> {
        let mut snapshot = trainer.model().clone();
        snapshot.set_mode(BnMode::Eval);
        for task in &target_tasks {
            let v = evaluate_head(&snapshot, task, SplitKind::Val, &pool.norm)?;
            if best.get(&task.id).map_or(true, |(b, ..)| v > *b) {
                best.insert(task.id, (v, trainer.iteration(), snapshot.clone()));
            }
        }
        Ok(())
    };
    while !trainer.is_done() {
        trainer.step()?;
        if trainer.iteration() % eval_every == 0 || trainer.is_done() {
            evaluate(&trainer)?;
        }
    }
    let (_, log) = trainer.finish();
    let seen = log.seen.expect("auditing enabled");
    for task in &target_tasks {
        let held_out = task
            .splits
            .get(SplitKind::Val)
            .iter()
            .chain(task.splits.get(SplitKind::Test))
            .filter(|&&index| seen.contains(&SampleId { task: task.id, index }))
            .count();
        if held_out > 0 {
            return Err(Error::Leakage {
                task: task.name.clone(),
                count: held_out,
            });
        }
    }
    target_tasks
        .iter()
        .map(|task| {
            let (val_score, best_iteration, snapshot) = &best[&task.id];
            Ok(JointResult {
                task: task.id,
                score: evaluate_head(snapshot, task, SplitKind::Test, &pool.norm)?,
                val_score: *val_score,
                best_iteration: *best_iteration,
            })
        })
        .collect()
}
