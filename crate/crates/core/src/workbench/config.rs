use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pool::manifest::hex;
use crate::pool::{desk_pool_specs, GeneratorFamily, PoolSpec, TaskSpec};
use crate::trainer::{HyperCombo, TrainSchedule};
use crate::transfer::{FineTuneConfig, SvmConfig};

/// Where the task pool comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolSource {
    /// Generate synthetic tasks from this spec.
    Synthetic(PoolSpec),
    /// Load a saved pool (manifest file or its directory).
    Manifest(PathBuf),
}

/// Hyperparameter axes; the grid is their Cartesian product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub learning_rates: Vec<f64>,
    pub head_lr_multipliers: Vec<f64>,
    pub trunk_archs: Vec<String>,
    pub warm_up: Vec<bool>,
}

impl GridSpec {
    /// 4 learning rates × 3 multipliers × 2 architectures × warm-up on/off.
    pub fn full_scale() -> Self {
        GridSpec {
            learning_rates: vec![1e-3, 1e-4, 1e-5, 1e-6],
            head_lr_multipliers: vec![1.0, 5.0, 10.0],
            trunk_archs: vec!["plain3".into(), "plain4".into()],
            warm_up: vec![true, false],
        }
    }
}

/// Combinations in `γ × τ × arch × warm-up` order.
pub fn enumerate_grid(grid: &GridSpec) -> Result<Vec<HyperCombo>> {
    let empty = |axis: &str| Err(Error::InvalidConfig(format!("grid axis `{axis}` is empty")));
    if grid.learning_rates.is_empty() {
        return empty("learning_rates");
    }
    if grid.head_lr_multipliers.is_empty() {
        return empty("head_lr_multipliers");
    }
    if grid.trunk_archs.is_empty() {
        return empty("trunk_archs");
    }
    if grid.warm_up.is_empty() {
        return empty("warm_up");
    }
    let mut combos = Vec::new();
    for &lr in &grid.learning_rates {
        for &m in &grid.head_lr_multipliers {
            for arch in &grid.trunk_archs {
                for &w in &grid.warm_up {
                    let c = HyperCombo {
                        lr,
                        head_lr_multiplier: m,
                        trunk_arch: arch.clone(),
                        warm_up: w,
                    };
                    c.validate()?;
                    combos.push(c);
                }
            }
        }
    }
    Ok(combos)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Leave-one-task-out selection runs (feature extraction on validation).
    Loto,
    FeatureExtraction,
    FineTune,
    Scratch,
    Joint,
    SingleSource,
}

impl Protocol {
    pub const ALL: [Protocol; 6] = [
        Protocol::Loto,
        Protocol::FeatureExtraction,
        Protocol::FineTune,
        Protocol::Scratch,
        Protocol::Joint,
        Protocol::SingleSource,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Loto => "loto",
            Protocol::FeatureExtraction => "feature-extraction",
            Protocol::FineTune => "fine-tune",
            Protocol::Scratch => "scratch",
            Protocol::Joint => "joint",
            Protocol::SingleSource => "single-source",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::UnknownProtocol(name.to_string()))
    }
}

/// One JSON file driving a whole reproduction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub pool: PoolSource,
    pub grid: GridSpec,
    pub seeds: Vec<u64>,
    /// Seed fields inside are replaced by derived per-run seeds.
    pub schedule: TrainSchedule,
    pub fine_tune: FineTuneConfig,
    #[serde(default)]
    pub svm: SvmConfig,
    pub protocols: Vec<Protocol>,
    /// Names of the tasks to evaluate; all tasks when absent.
    #[serde(default)]
    pub targets: Option<Vec<String>>,
    /// Joint training scores target heads on validation this often.
    pub joint_eval_every: usize,
    #[serde(default)]
    pub recalibrate_bn: bool,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// The synthetic desk pool with the four tasks under 2,000 training
    /// samples as targets, a two-combo grid and three seeds.
    pub fn desk() -> Self {
        ExperimentConfig {
            pool: PoolSource::Synthetic(desk_pool_specs()),
            grid: GridSpec {
                learning_rates: vec![1e-2],
                head_lr_multipliers: vec![1.0, 5.0],
                trunk_archs: vec!["plain3".into()],
                warm_up: vec![true],
            },
            seeds: vec![1, 2, 3],
            schedule: TrainSchedule {
                total_iterations: 6_000,
                warmup_iterations: 600,
                ..TrainSchedule::desk(0)
            },
            fine_tune: FineTuneConfig {
                lr_grid: vec![1e-2, 3e-3, 1e-3, 3e-4],
                ..FineTuneConfig::full_scale(0)
            },
            svm: SvmConfig::default(),
            protocols: Protocol::ALL.to_vec(),
            targets: Some(["lung-5c", "necrosis", "lymph-3c", "marrow-6c"].map(String::from).to_vec()),
            joint_eval_every: 600,
            recalibrate_bn: false,
            out_dir: None,
        }
    }

    /// A seconds-long configuration for smoke runs: five small tasks of 8×8
    /// images, the tiny trunk, two combos and two seeds.
    pub fn smoke() -> Self {
        let t = |name: &str, classes, samples, rel, group: Option<&str>| TaskSpec {
            name: name.into(),
            classes,
            samples,
            relatedness_seed: rel,
            related_group: group.map(String::from),
            noise_level: None,
        };
        ExperimentConfig {
            pool: PoolSource::Synthetic(PoolSpec {
                pool_seed: 7,
                family: GeneratorFamily::default(),
                image_size: (3, 8, 8),
                noise_level: 1.0,
                tasks: vec![
                    t("source-a", 2, 400, 1, None),
                    t("source-b", 3, 300, 2, None),
                    t("pair-a", 2, 150, 3, Some("pair")),
                    t("pair-b", 2, 150, 3, Some("pair")),
                    t("small", 3, 150, 4, None),
                ],
            }),
            grid: GridSpec {
                learning_rates: vec![1e-2],
                head_lr_multipliers: vec![1.0, 5.0],
                trunk_archs: vec!["tiny".into()],
                warm_up: vec![true],
            },
            seeds: vec![1, 2],
            schedule: TrainSchedule {
                total_iterations: 30,
                warmup_iterations: 5,
                warmup_lr: 1e-3,
                batch_size: 16,
                momentum: 0.9,
                seed: 0,
            },
            fine_tune: FineTuneConfig {
                epochs: 2,
                lr_grid: vec![1e-2, 1e-3],
                batch_size: 16,
                momentum: 0.9,
                seed: 0,
            },
            svm: SvmConfig {
                c_grid: vec![1e-4, 1e-2, 1.0],
                folds: 3,
            },
            protocols: Protocol::ALL.to_vec(),
            targets: Some(vec!["pair-a".into(), "pair-b".into(), "small".into()]),
            joint_eval_every: 10,
            recalibrate_bn: false,
            out_dir: None,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig = serde_json::from_str(&text)?;
        // Relative manifest paths are relative to the config file.
        if let PoolSource::Manifest(p) = &mut config.pool {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        enumerate_grid(&self.grid)?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seed list is empty".into()));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::InvalidConfig("seeds must be distinct".into()));
        }
        if self.protocols.is_empty() {
            return Err(Error::InvalidConfig("no protocols requested".into()));
        }
        if self.joint_eval_every == 0 {
            return Err(Error::InvalidConfig("joint_eval_every must be positive".into()));
        }
        if let PoolSource::Manifest(p) = &self.pool {
            if !p.exists() {
                return Err(Error::InvalidConfig(format!("pool manifest {} does not exist", p.display())));
            }
        }
        self.schedule.validate()?;
        self.fine_tune.validate()?;
        self.svm.validate()
    }

    /// SHA-256 of the canonical JSON encoding. The output directory and the
    /// protocol list are left out: neither changes the score of any cell, so
    /// stages run separately can share one results store.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.protocols.clear();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}
