//! Task registry: synthetic task generation, grouped splits, augmentation,
//! normalization and the pool manifest.

mod augment;
pub mod manifest;
mod split;
mod synthetic;
pub mod pathology;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use augment::{augment, denormalize, normalize, Image, NormStats};
pub use manifest::{load_pool, save_pool, PoolManifest, TaskEntry, POOL_MAGIC, POOL_VERSION};
pub use split::{grouped_split, SPLIT_RATIOS};
pub use synthetic::{desk_pool_specs, generate_pool, generate_task, GeneratorFamily, PoolSpec, SyntheticSpec, TaskSpec};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u32);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MetricKind {
    #[serde(rename = "ACC")]
    Accuracy,
    #[serde(rename = "ROC_AUC")]
    RocAuc,
}

impl MetricKind {
    /// ROC AUC for binary tasks, accuracy otherwise.
    pub fn for_classes(classes: usize) -> Self {
        if classes == 2 {
            MetricKind::RocAuc
        } else {
            MetricKind::Accuracy
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::Accuracy => "ACC",
            MetricKind::RocAuc => "ROC_AUC",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, kind: SplitKind) -> &[usize] {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

/// Identifies one sample of one task, used for leakage audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub task: TaskId,
    pub index: usize,
}

/// A classification task with its images, labels, group keys and splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub id: TaskId,
    pub name: String,
    pub classes: usize,
    /// `(channels, height, width)` of every image.
    pub image_size: (usize, usize, usize),
    /// Row-major `samples × channels × height × width`, not normalized.
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    /// Patient/slide analog; samples sharing a key stay in one split.
    pub groups: Vec<u32>,
    pub splits: Splits,
    pub metric: MetricKind,
    pub related_group: Option<String>,
}

impl Task {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        let (c, h, w) = self.image_size;
        c * h * w
    }

    pub fn image(&self, index: usize) -> Image {
        let n = self.image_len();
        let (c, h, w) = self.image_size;
        Image {
            channels: c,
            height: h,
            width: w,
            data: self.images[index * n..(index + 1) * n].to_vec(),
        }
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }

    /// Checks the task invariants: at least two classes, every class in the
    /// training split, disjoint and exhaustive splits that never split a group.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("task `{}`: {m}", self.name)));
        if self.classes < 2 {
            return bad(format!("needs at least 2 classes, has {}", self.classes));
        }
        let n = self.len();
        if self.images.len() != n * self.image_len() || self.groups.len() != n {
            return bad("image/label/group lengths disagree".into());
        }
        if self.labels.iter().any(|&l| l >= self.classes) {
            return bad("label out of range".into());
        }
        let mut seen = vec![false; n];
        for kind in [SplitKind::Train, SplitKind::Val, SplitKind::Test] {
            for &i in self.splits.get(kind) {
                if i >= n || seen[i] {
                    return bad(format!("split index {i} out of range or repeated"));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("splits are not exhaustive".into());
        }
        if self.class_counts(&self.splits.train).contains(&0) {
            return bad("a class has no training sample".into());
        }
        let group_sets: Vec<BTreeSet<u32>> = [SplitKind::Train, SplitKind::Val, SplitKind::Test]
            .iter()
            .map(|&k| self.splits.get(k).iter().map(|&i| self.groups[i]).collect())
            .collect();
        for a in 0..3 {
            for b in a + 1..3 {
                if group_sets[a].intersection(&group_sets[b]).next().is_some() {
                    return bad("a group straddles two splits".into());
                }
            }
        }
        Ok(())
    }
}

/// Counts needed for pool bookkeeping; implemented by loaded tasks and by
/// manifest entries that carry no pixel data.
pub trait TaskCounts {
    fn sample_count(&self) -> usize;
    fn class_count(&self) -> usize;
}

impl TaskCounts for Task {
    fn sample_count(&self) -> usize {
        self.len()
    }
    fn class_count(&self) -> usize {
        self.classes
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub task_count: usize,
    pub class_total: usize,
    pub image_total: usize,
}

pub fn pool_summary<T: TaskCounts>(tasks: &[T]) -> PoolSummary {
    PoolSummary {
        task_count: tasks.len(),
        class_total: tasks.iter().map(|t| t.class_count()).sum(),
        image_total: tasks.iter().map(|t| t.sample_count()).sum(),
    }
}

/// Task ids plus groups of closely related tasks; enough to plan
/// leave-one-task-out evaluation without loading any data.
pub trait PoolLayout {
    fn task_ids(&self) -> Vec<TaskId>;
    fn related_groups(&self) -> &[Vec<TaskId>];
}

/// Checks that related groups reference existing tasks and are disjoint.
pub fn validate_related_groups(ids: &[TaskId], groups: &[Vec<TaskId>]) -> Result<()> {
    let known: BTreeSet<TaskId> = ids.iter().copied().collect();
    if known.len() != ids.len() {
        return Err(Error::InvalidConfig("duplicate task ids in pool".into()));
    }
    let mut used = BTreeSet::new();
    for g in groups {
        if g.is_empty() {
            return Err(Error::InvalidConfig("empty related group".into()));
        }
        for t in g {
            if !known.contains(t) {
                return Err(Error::InvalidConfig(format!("related group references unknown task {t}")));
            }
            if !used.insert(*t) {
                return Err(Error::InvalidConfig(format!("task {t} appears in two related groups")));
            }
        }
    }
    Ok(())
}

/// The pool of tasks used for multi-task training.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPool {
    pub tasks: Vec<Task>,
    pub related_groups: Vec<Vec<TaskId>>,
    pub norm: NormStats,
}

impl TaskPool {
    pub fn new(tasks: Vec<Task>, related_groups: Vec<Vec<TaskId>>, norm: NormStats) -> Result<Self> {
        let ids: Vec<TaskId> = tasks.iter().map(|t| t.id).collect();
        validate_related_groups(&ids, &related_groups)?;
        for t in &tasks {
            t.validate()?;
        }
        Ok(TaskPool {
            tasks,
            related_groups,
            norm,
        })
    }

    pub fn summary(&self) -> PoolSummary {
        pool_summary(&self.tasks)
    }

    pub fn task(&self, id: TaskId) -> Result<&Task> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::UnknownTask(id.to_string()))
    }

    pub fn task_by_name(&self, name: &str) -> Result<&Task> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn classes(&self) -> BTreeMap<TaskId, usize> {
        self.tasks.iter().map(|t| (t.id, t.classes)).collect()
    }

    /// The pool without the tasks in `excluded`; related groups are
    /// restricted to the remaining tasks.
    pub fn without(&self, excluded: &BTreeSet<TaskId>) -> TaskPool {
        let tasks: Vec<Task> = self
            .tasks
            .iter()
            .filter(|t| !excluded.contains(&t.id))
            .cloned()
            .collect();
        let related_groups = self
            .related_groups
            .iter()
            .map(|g| g.iter().copied().filter(|t| !excluded.contains(t)).collect::<Vec<_>>())
            .filter(|g| !g.is_empty())
            .collect();
        TaskPool {
            tasks,
            related_groups,
            norm: self.norm.clone(),
        }
    }

    pub fn image_size(&self) -> Option<(usize, usize, usize)> {
        self.tasks.first().map(|t| t.image_size)
    }
}

impl PoolLayout for TaskPool {
    fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|t| t.id).collect()
    }
    fn related_groups(&self) -> &[Vec<TaskId>] {
        &self.related_groups
    }
}
