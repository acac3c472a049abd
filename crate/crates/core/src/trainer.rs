//! Multi-task training: task-uniform batch sampling, the averaged per-task
//! cross-entropy loss, SGD with momentum, an optional head-only warm-up and a
//! head learning-rate multiplier.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{kernels::log_sum_exp, Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Batch, MtlModel, RoutedOutput};
use crate::nn::{BnMode, TrunkConfig};
use crate::pool::{augment, normalize, NormStats, SampleId, SplitKind, Task, TaskId, TaskPool};
use crate::seed::{derive_seed, stream};

/// One cell of the hyperparameter grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperCombo {
    /// Trunk learning rate γ.
    pub lr: f64,
    /// Head learning rate is `lr · head_lr_multiplier`.
    pub head_lr_multiplier: f64,
    pub trunk_arch: String,
    pub warm_up: bool,
}

impl HyperCombo {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if !(self.head_lr_multiplier >= 0.0 && self.head_lr_multiplier.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "head learning-rate multiplier {} must be non-negative",
                self.head_lr_multiplier
            )));
        }
        Ok(())
    }

    pub fn head_lr(&self) -> f64 {
        self.lr * self.head_lr_multiplier
    }

    /// Stable identifier, also the lexicographic tie-break key in selection.
    pub fn id(&self) -> String {
        format!(
            "lr={:e}|mult={}|arch={}|warmup={}",
            self.lr, self.head_lr_multiplier, self.trunk_arch, self.warm_up
        )
    }
}

impl fmt::Display for HyperCombo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Includes the warm-up iterations.
    pub total_iterations: usize,
    pub warmup_iterations: usize,
    pub warmup_lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainSchedule {
    /// 50k iterations, 5k warm-up at 1e-3, batches of 64, momentum 0.9.
    pub fn full_scale(seed: u64) -> Self {
        TrainSchedule {
            total_iterations: 50_000,
            warmup_iterations: 5_000,
            warmup_lr: 1e-3,
            batch_size: 64,
            momentum: 0.9,
            seed,
        }
    }

    /// Desk budget keeping the 10% warm-up ratio.
    pub fn desk(seed: u64) -> Self {
        TrainSchedule {
            total_iterations: 5_000,
            warmup_iterations: 500,
            ..Self::full_scale(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iterations >= self.total_iterations {
            return Err(Error::InvalidConfig(format!(
                "warm-up ({}) must be shorter than the total budget ({})",
                self.warmup_iterations, self.total_iterations
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.warmup_lr > 0.0) {
            return Err(Error::InvalidConfig("warm-up learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized images of `indices` of `task`, stacked into a tensor. With an
/// RNG each image is augmented, otherwise it is center-cropped to a square.
pub fn load_images<R: Rng>(
    task: &Task,
    indices: &[usize],
    norm: &NormStats,
    augment_rng: Option<&mut R>,
) -> Result<Tensor<f32>> {
    let (c, h, w) = task.image_size;
    let side = h.min(w);
    let mut data = Vec::with_capacity(indices.len() * c * side * side);
    match augment_rng {
        Some(rng) => {
            for &i in indices {
                let img = normalize(&augment(&task.image(i), rng), norm)?;
                data.extend_from_slice(&img.data);
            }
        }
        None => {
            let off_y = (h - side) / 2;
            let off_x = (w - side) / 2;
            for &i in indices {
                let img = normalize(&task.image(i), norm)?;
                for ch in 0..c {
                    for y in off_y..off_y + side {
                        let row = (ch * h + y) * w;
                        data.extend_from_slice(&img.data[row + off_x..row + off_x + side]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![indices.len(), c, side, side], data)
}

/// Draws `batch_size` samples: a task uniformly from the pool, then a
/// training image uniformly from that task.
pub fn sample_batch<R: Rng>(pool: &TaskPool, batch_size: usize, rng: &mut R) -> Result<Batch<f32>> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("cannot sample from an empty pool".into()));
    }
    let mut picks: Vec<(usize, usize)> = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let t = rng.gen_range(0..pool.tasks.len());
        let train = pool.tasks[t].splits.get(SplitKind::Train);
        picks.push((t, train[rng.gen_range(0..train.len())]));
    }
    let (c, h, w) = pool.tasks[0].image_size;
    let side = h.min(w);
    let mut data = Vec::with_capacity(batch_size * c * side * side);
    let mut task_of = Vec::with_capacity(batch_size);
    let mut labels = Vec::with_capacity(batch_size);
    let mut sample_ids = Vec::with_capacity(batch_size);
    for &(t, i) in &picks {
        let task = &pool.tasks[t];
        if task.image_size != (c, h, w) {
            return Err(Error::InvalidConfig(format!("task `{}` has a different image size", task.name)));
        }
        let img = normalize(&augment(&task.image(i), rng), &pool.norm)?;
        data.extend_from_slice(&img.data);
        task_of.push(task.id);
        labels.push(task.labels[i]);
        sample_ids.push(SampleId { task: task.id, index: i });
    }
    Ok(Batch {
        images: Tensor::new(vec![batch_size, c, side, side], data)?,
        task_of,
        labels,
        sample_ids,
    })
}

/// `L = (1/B)·Σ_i ℓ_i`, where `ℓ_i` sums the cross-entropy over the batch
/// samples of task `i`. `labels` is indexed by batch position.
pub fn mtl_loss<F: Float>(outputs: &BTreeMap<TaskId, RoutedOutput<F>>, labels: &[usize]) -> Result<f64> {
    let b = labels.len();
    let mut covered = vec![false; b];
    let mut total = 0.0f64;
    for (task, out) in outputs {
        let c = out.logits.dims()[1];
        let mut task_loss = 0.0f64;
        for (row, &i) in out.indices.iter().enumerate() {
            if i >= b || covered[i] {
                return Err(Error::InvalidArgument(format!(
                    "sample {i} of task {task} is out of range or routed twice"
                )));
            }
            covered[i] = true;
            let logits: Vec<f64> = out.logits.data()[row * c..(row + 1) * c].iter().map(|v| v.to_f64()).collect();
            task_loss += log_sum_exp(&logits) - logits[labels[i]];
        }
        total += task_loss;
    }
    if let Some(missing) = covered.iter().position(|c| !c) {
        return Err(Error::InvalidArgument(format!("batch sample {missing} is not covered by any task")));
    }
    Ok(total / b as f64)
}

/// SGD with momentum on the parameters listed in `active`, each with its own
/// learning rate: `v ← μ·v + g; p ← p − lr·v`. Other parameters are untouched.
pub fn sgd_step<F: Float>(params: &mut ParamStore<F>, active: &[(ParamId, f64)], momentum: f64) {
    let mu = F::from_f64(momentum);
    for &(id, lr) in active {
        let lr = F::from_f64(lr);
        let p = params.get_mut(id);
        for ((v, g), x) in p
            .momentum
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(p.value.data_mut())
        {
            *v = mu * *v + *g;
            *x -= lr * *v;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    WarmUp,
    Main,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub loss: f64,
    pub lr: f64,
    pub head_lr: f64,
    pub phase: Phase,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// Every sample drawn into a training batch, when auditing is enabled.
    pub seen: Option<BTreeSet<SampleId>>,
}

impl TrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for e in &self.entries {
            let line = serde_json::to_string(e)?;
            writeln!(f, "{line}").map_err(|err| Error::io(path, err))?;
        }
        Ok(())
    }

    /// Mean loss over the first and last `window` iterations.
    pub fn loss_trend(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.entries.len();
        if n < 2 * window || window == 0 {
            return None;
        }
        let mean = |s: &[LogEntry]| s.iter().map(|e| e.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.entries[..window]), mean(&self.entries[n - window..])))
    }
}

/// How the trunk is initialized before multi-task training.
#[derive(Clone, Debug, Default)]
pub enum TrunkInit {
    #[default]
    Random,
    /// Start from an existing trunk (e.g. pre-trained on a generic source task).
    Pretrained(MtlModel<f32>),
}

/// Trunk configuration for `arch` on images of the given pool.
pub fn trunk_config_for(pool: &TaskPool, arch: &str) -> Result<TrunkConfig> {
    let (c, h, w) = pool
        .image_size()
        .ok_or_else(|| Error::InvalidArgument("empty pool".into()))?;
    let side = h.min(w);
    TrunkConfig::for_arch(arch, (c, side, side))
}

/// Step-wise multi-task trainer.
pub struct MtlTrainer<'a> {
    pool: &'a TaskPool,
    combo: HyperCombo,
    schedule: TrainSchedule,
    model: MtlModel<f32>,
    rng: ChaCha8Rng,
    iteration: usize,
    log: TrainLog,
}

impl<'a> MtlTrainer<'a> {
    pub fn new(pool: &'a TaskPool, combo: &HyperCombo, schedule: &TrainSchedule, init: &TrunkInit) -> Result<Self> {
        combo.validate()?;
        schedule.validate()?;
        if pool.is_empty() {
            return Err(Error::InvalidArgument("cannot train on an empty pool".into()));
        }
        let config = trunk_config_for(pool, &combo.trunk_arch)?;
        let init_seed = derive_seed(schedule.seed, "mtl/init");
        let model = match init {
            TrunkInit::Random => MtlModel::new(&config, &pool.classes(), init_seed)?,
            TrunkInit::Pretrained(trunk) => {
                if trunk.trunk.config != config {
                    return Err(Error::InvalidConfig(format!(
                        "pre-trained trunk does not match architecture `{}`",
                        combo.trunk_arch
                    )));
                }
                let mut m = trunk.trunk_copy();
                for (task, c) in pool.classes() {
                    m.add_head(task, c, init_seed)?;
                }
                m
            }
        };
        Ok(MtlTrainer {
            pool,
            combo: combo.clone(),
            schedule: schedule.clone(),
            model,
            rng: stream(schedule.seed, "mtl/batches"),
            iteration: 0,
            log: TrainLog::default(),
        })
    }

    /// Records the id of every sample drawn into a batch.
    pub fn audit_samples(mut self) -> Self {
        self.log.seen = Some(BTreeSet::new());
        self
    }

    pub fn model(&self) -> &MtlModel<f32> {
        &self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.schedule.total_iterations
    }

    pub fn phase(&self) -> Phase {
        if self.combo.warm_up && self.iteration < self.schedule.warmup_iterations {
            Phase::WarmUp
        } else {
            Phase::Main
        }
    }

    /// One SGD iteration; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let phase = self.phase();
        let batch = sample_batch(self.pool, self.schedule.batch_size, &mut self.rng)?;
        let (trunk_lr, head_lr) = match phase {
            Phase::WarmUp => (None, self.schedule.warmup_lr),
            Phase::Main => (Some(self.combo.lr), self.combo.head_lr()),
        };
        let loss = train_step(&mut self.model, &batch, trunk_lr, head_lr, self.schedule.momentum)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: self.iteration,
                loss,
            });
        }
        if let Some(seen) = self.log.seen.as_mut() {
            seen.extend(batch.sample_ids.iter().copied());
        }
        self.log.entries.push(LogEntry {
            iteration: self.iteration,
            loss,
            lr: trunk_lr.unwrap_or(0.0),
            head_lr,
            phase,
        });
        self.iteration += 1;
        Ok(loss)
    }

    pub fn run(mut self) -> Result<(MtlModel<f32>, TrainLog)> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn finish(mut self) -> (MtlModel<f32>, TrainLog) {
        self.model.set_mode(BnMode::Eval);
        (self.model, self.log)
    }
}

/// Forward, backward and parameter update for one batch. With `trunk_lr`
/// set to `None` the trunk (weights and batch-norm statistics) is frozen and
/// only heads move; otherwise the trunk moves at that rate. Heads of tasks
/// present in the batch move at `head_lr`; heads of absent tasks are never
/// touched. A non-finite loss is returned without updating anything.
pub fn train_step(
    model: &mut MtlModel<f32>,
    batch: &Batch<f32>,
    trunk_lr: Option<f64>,
    head_lr: f64,
    momentum: f64,
) -> Result<f64> {
    model.set_mode(if trunk_lr.is_some() { BnMode::Train } else { BnMode::Frozen });
    let mut rg = model.routed_graph(batch)?;
    rg.graph.forward(&model.params, &mut model.bn, &rg.feed)?;
    let loss = rg.graph.value(rg.loss).expect("forward ran").data()[0].to_f64();
    if !loss.is_finite() {
        return Ok(loss);
    }
    rg.graph.backward(rg.loss, &mut model.params)?;
    let mut active = Vec::new();
    if let Some(lr) = trunk_lr {
        active.extend(model.trunk_param_ids().into_iter().map(|id| (id, lr)));
    }
    for t in rg.routes.keys() {
        for id in model.head_param_ids(*t)? {
            active.push((id, head_lr));
        }
    }
    sgd_step(&mut model.params, &active, momentum);
    Ok(loss)
}

pub fn train_mtl(
    pool: &TaskPool,
    combo: &HyperCombo,
    schedule: &TrainSchedule,
    init: &TrunkInit,
) -> Result<(MtlModel<f32>, TrainLog)> {
    MtlTrainer::new(pool, combo, schedule, init)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;

    #[test]
    fn sgd_first_and_second_step() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("p", Tensor::scalar(0.0)).unwrap();
        ps.get_mut(id).grad = Tensor::scalar(1.0);
        sgd_step(&mut ps, &[(id, 0.1)], 0.9);
        assert!((ps.get(id).value.data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut ps, &[(id, 0.1)], 0.9);
        assert!((ps.get(id).momentum.data()[0] - 1.9).abs() < 1e-15);
        assert!((ps.get(id).value.data()[0] + 0.1 + 0.19).abs() < 1e-15);
    }

    #[test]
    fn inactive_parameters_untouched() {
        let mut ps = ParamStore::<f32>::new();
        let a = ps.add("a", Tensor::scalar(1.0)).unwrap();
        let b = ps.add("b", Tensor::scalar(2.0)).unwrap();
        ps.get_mut(b).grad = Tensor::scalar(5.0);
        ps.get_mut(b).momentum = Tensor::scalar(0.5);
        let before = ps.get(b).clone();
        sgd_step(&mut ps, &[(a, 0.1)], 0.9);
        assert_eq!(ps.get(b), &before);
    }

    #[test]
    fn two_sample_loss() {
        // True-class probabilities 0.5 and 0.25.
        let out1 = RoutedOutput {
            indices: vec![0],
            logits: Tensor::<f64>::from_f64_slice(&[1, 2], &[0.0, 0.0]).unwrap(),
            probs: Tensor::zeros(&[1, 2]),
        };
        let out2 = RoutedOutput {
            indices: vec![1],
            logits: Tensor::<f64>::from_f64_slice(&[1, 4], &[0.0; 4]).unwrap(),
            probs: Tensor::zeros(&[1, 4]),
        };
        let outputs = BTreeMap::from([(TaskId(0), out1), (TaskId(1), out2)]);
        let l = mtl_loss(&outputs, &[1, 3]).unwrap();
        assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((l - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn coverage_gap_is_an_error() {
        let out = RoutedOutput {
            indices: vec![0],
            logits: Tensor::<f64>::zeros(&[1, 2]),
            probs: Tensor::zeros(&[1, 2]),
        };
        let outputs = BTreeMap::from([(TaskId(0), out)]);
        assert!(mtl_loss(&outputs, &[0, 1]).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::desk(0).validate().is_ok());
        let mut s = TrainSchedule::desk(0);
        s.warmup_iterations = s.total_iterations;
        assert!(s.validate().is_err());
        let c = HyperCombo {
            lr: 0.0,
            head_lr_multiplier: 1.0,
            trunk_arch: "plain3".into(),
            warm_up: false,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn desk_schedule_keeps_warmup_ratio() {
        let full = TrainSchedule::full_scale(0);
        let desk = TrainSchedule::desk(0);
        assert_eq!(
            full.warmup_iterations * desk.total_iterations,
            desk.warmup_iterations * full.total_iterations
        );
    }
}
