//! Procedural texture tasks. A generator family defines a bank of separable
//! cosine textures `colour[c]·cos(2π·fx·x/W + φx)·cos(2π·fy·y/H + φy)`; each
//! class of a task is identified by a small set of bank textures. Tasks drawn
//! with the same relatedness seed use the same textures for their classes, so
//! features learned on one transfer to the other. Flips only change texture
//! phase, never frequency, so flip augmentation preserves labels.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{grouped_split, MetricKind, NormStats, Task, TaskId, TaskPool};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorFamily {
    pub family_seed: u64,
    /// Bank holds every `(fx, fy)` in `0..=max_frequency` except `(0, 0)`.
    pub max_frequency: usize,
    /// Half-width of the uniform per-sample phase jitter, radians.
    pub phase_jitter: f64,
    /// Random bank textures added to every image regardless of class.
    pub distractors: usize,
    pub distractor_amplitude: f64,
    pub samples_per_group: usize,
    /// Std of the per-group, per-channel intensity offset.
    pub group_shift: f64,
}

impl Default for GeneratorFamily {
    fn default() -> Self {
        GeneratorFamily {
            family_seed: 0x5eed_0001,
            max_frequency: 4,
            phase_jitter: PI / 3.0,
            distractors: 2,
            distractor_amplitude: 0.8,
            samples_per_group: 10,
            group_shift: 0.3,
        }
    }
}

#[derive(Clone, Debug)]
struct Texture {
    fx: f64,
    fy: f64,
    colour: Vec<f64>,
    phase_x: f64,
    phase_y: f64,
}

impl GeneratorFamily {
    pub fn bank_size(&self) -> usize {
        (self.max_frequency + 1).pow(2) - 1
    }

    fn bank(&self, channels: usize) -> Vec<Texture> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.family_seed);
        let mut bank = Vec::with_capacity(self.bank_size());
        for fy in 0..=self.max_frequency {
            for fx in 0..=self.max_frequency {
                if fx == 0 && fy == 0 {
                    continue;
                }
                let raw: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
                let scale = (channels as f64).sqrt() / norm;
                bank.push(Texture {
                    fx: fx as f64,
                    fy: fy as f64,
                    colour: raw.iter().map(|v| v * scale).collect(),
                    phase_x: rng.gen_range(0.0..2.0 * PI),
                    phase_y: rng.gen_range(0.0..2.0 * PI),
                });
            }
        }
        bank
    }

    /// Per-channel mean/std of images drawn from the whole family, used as the
    /// fixed normalization statistics of a pool.
    pub fn norm_stats(&self, image_size: (usize, usize, usize), noise_level: f64) -> NormStats {
        let (c, h, w) = image_size;
        let bank = self.bank(c);
        let mut rng = stream(self.family_seed, "norm-stats");
        let normal = Normal::new(0.0, noise_level.max(1e-12)).expect("positive std");
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let probes = 512;
        let mut img = vec![0.0f64; c * h * w];
        for _ in 0..probes {
            img.iter_mut().for_each(|v| *v = 0.0);
            for _ in 0..2 + self.distractors {
                let t = &bank[rng.gen_range(0..bank.len())];
                let amp = rng.gen_range(0.6..1.2);
                add_texture(&mut img, t, amp, rng.gen_range(-PI..PI), rng.gen_range(-PI..PI), image_size);
            }
            let offset: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0) * self.group_shift).collect();
            for ch in 0..c {
                for v in &mut img[ch * h * w..(ch + 1) * h * w] {
                    let x = *v + offset[ch] + normal.sample(&mut rng);
                    sum[ch] += x;
                    sq[ch] += x * x;
                }
            }
        }
        let count = (probes * h * w) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(1e-12).sqrt())
            .collect::<Vec<f64>>();
        NormStats {
            mean: mean.iter().map(|&v| v as f32).collect(),
            std: std.iter().map(|&v| v as f32).collect(),
        }
    }
}

fn add_texture(img: &mut [f64], t: &Texture, amp: f64, jitter_x: f64, jitter_y: f64, size: (usize, usize, usize)) {
    let (c, h, w) = size;
    let vx: Vec<f64> = (0..w)
        .map(|x| (2.0 * PI * t.fx * x as f64 / w as f64 + t.phase_x + jitter_x).cos())
        .collect();
    let vy: Vec<f64> = (0..h)
        .map(|y| (2.0 * PI * t.fy * y as f64 / h as f64 + t.phase_y + jitter_y).cos())
        .collect();
    for ch in 0..c {
        let k = amp * t.colour[ch];
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for (y, row) in plane.chunks_mut(w).enumerate() {
            let ky = k * vy[y];
            for (p, &xv) in row.iter_mut().zip(&vx) {
                *p += ky * xv;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub family: GeneratorFamily,
    pub class_count: usize,
    pub sample_count: usize,
    /// `(channels, height, width)`.
    pub image_size: (usize, usize, usize),
    /// Tasks sharing this seed identify their classes with the same textures.
    pub relatedness_seed: u64,
    pub noise_level: f64,
    #[serde(default = "default_textures_per_class")]
    pub textures_per_class: usize,
}

fn default_textures_per_class() -> usize {
    2
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("degenerate synthetic spec: {m}")));
        let (c, h, w) = self.image_size;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("image size {:?}", self.image_size));
        }
        if self.class_count < 2 {
            return bad(format!("{} classes", self.class_count));
        }
        if self.sample_count < 10 * self.class_count {
            return bad(format!(
                "{} samples for {} classes (need at least 10 per class)",
                self.sample_count, self.class_count
            ));
        }
        if self.textures_per_class == 0 || self.class_count * self.textures_per_class > self.family.bank_size() {
            return bad(format!(
                "{} classes × {} textures exceed the bank of {}",
                self.class_count,
                self.textures_per_class,
                self.family.bank_size()
            ));
        }
        if self.family.samples_per_group == 0 || self.sample_count / self.family.samples_per_group < 10 {
            return bad("fewer than 10 sample groups".into());
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise level {}", self.noise_level));
        }
        Ok(())
    }

    fn signatures(&self, bank_size: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..bank_size).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.relatedness_seed));
        (0..self.class_count)
            .map(|c| order[c * self.textures_per_class..(c + 1) * self.textures_per_class].to_vec())
            .collect()
    }
}

/// Generates one task deterministically from `(spec, seed)`. The returned task
/// has id 0 and a placeholder name.
pub fn generate_task(spec: &SyntheticSpec, seed: u64) -> Result<Task> {
    spec.validate()?;
    let (c, h, w) = spec.image_size;
    let n = spec.sample_count;
    let fam = &spec.family;
    let bank = fam.bank(c);
    let signatures = spec.signatures(bank.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.class_count).collect();
    labels.shuffle(&mut rng);
    let n_groups = n / fam.samples_per_group;
    let groups: Vec<u32> = (0..n)
        .map(|i| (i / fam.samples_per_group).min(n_groups - 1) as u32)
        .collect();
    let offsets: Vec<Vec<f64>> = (0..n_groups)
        .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0) * fam.group_shift).collect())
        .collect();
    let contrasts: Vec<f64> = (0..n_groups).map(|_| rng.gen_range(0.85..1.15)).collect();
    let noise = Normal::new(0.0, spec.noise_level.max(1e-12)).expect("validated");

    let size = c * h * w;
    let mut images = Vec::with_capacity(n * size);
    let mut img = vec![0.0f64; size];
    for i in 0..n {
        img.iter_mut().for_each(|v| *v = 0.0);
        let j = fam.phase_jitter;
        for &t in &signatures[labels[i]] {
            let amp = rng.gen_range(0.6..1.2);
            let (jx, jy) = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
            add_texture(&mut img, &bank[t], amp, jx, jy, spec.image_size);
        }
        for _ in 0..fam.distractors {
            let t = rng.gen_range(0..bank.len());
            let amp = fam.distractor_amplitude * rng.gen_range(0.6..1.2);
            let (jx, jy) = (rng.gen_range(-PI..PI), rng.gen_range(-PI..PI));
            add_texture(&mut img, &bank[t], amp, jx, jy, spec.image_size);
        }
        let g = groups[i] as usize;
        for ch in 0..c {
            for v in &mut img[ch * h * w..(ch + 1) * h * w] {
                let x = *v * contrasts[g] + offsets[g][ch] + noise.sample(&mut rng);
                images.push(x as f32);
            }
        }
    }
    let splits = grouped_split(&groups, &labels, spec.class_count, &mut rng)?;
    let task = Task {
        id: TaskId(0),
        name: "synthetic".into(),
        classes: spec.class_count,
        image_size: spec.image_size,
        images,
        labels,
        groups,
        splits,
        metric: MetricKind::for_classes(spec.class_count),
        related_group: None,
    };
    task.validate()?;
    Ok(task)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub classes: usize,
    pub samples: usize,
    pub relatedness_seed: u64,
    #[serde(default)]
    pub related_group: Option<String>,
    #[serde(default)]
    pub noise_level: Option<f64>,
}

/// Declarative description of a synthetic pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub pool_seed: u64,
    #[serde(default)]
    pub family: GeneratorFamily,
    pub image_size: (usize, usize, usize),
    pub noise_level: f64,
    pub tasks: Vec<TaskSpec>,
}

impl PoolSpec {
    pub fn synthetic_spec(&self, t: &TaskSpec) -> SyntheticSpec {
        SyntheticSpec {
            family: self.family.clone(),
            class_count: t.classes,
            sample_count: t.samples,
            image_size: self.image_size,
            relatedness_seed: t.relatedness_seed,
            noise_level: t.noise_level.unwrap_or(self.noise_level),
            textures_per_class: default_textures_per_class(),
        }
    }

    pub fn task_seed(&self, id: TaskId) -> u64 {
        derive_seed(self.pool_seed, &format!("task/{}", id.0))
    }
}

/// Builds every task of `spec` in parallel; each task's stream depends only on
/// `(pool_seed, task id)`.
pub fn generate_pool(spec: &PoolSpec) -> Result<TaskPool> {
    let tasks: Vec<Task> = spec
        .tasks
        .par_iter()
        .enumerate()
        .map(|(i, ts)| {
            let id = TaskId(i as u32);
            let mut task = generate_task(&spec.synthetic_spec(ts), spec.task_seed(id))?;
            task.id = id;
            task.name = ts.name.clone();
            task.related_group = ts.related_group.clone();
            Ok(task)
        })
        .collect::<Result<_>>()?;
    let mut groups: BTreeMap<String, Vec<TaskId>> = BTreeMap::new();
    for t in &tasks {
        if let Some(g) = &t.related_group {
            groups.entry(g.clone()).or_default().push(t.id);
        }
    }
    let norm = spec.family.norm_stats(spec.image_size, spec.noise_level);
    TaskPool::new(tasks, groups.into_values().collect(), norm)
}

/// Default desk pool: 12 tasks, 200 to 20,000 samples, binary and 3–9 class
/// tasks, two related pairs.
pub fn desk_pool_specs() -> PoolSpec {
    let t = |name: &str, classes, samples, rel: u64, group: Option<&str>| TaskSpec {
        name: name.into(),
        classes,
        samples,
        relatedness_seed: rel,
        related_group: group.map(String::from),
        noise_level: None,
    };
    PoolSpec {
        pool_seed: 2024,
        family: GeneratorFamily::default(),
        image_size: (3, 16, 16),
        noise_level: 2.0,
        tasks: vec![
            t("stroma", 2, 20_000, 101, None),
            t("tissue-4c", 4, 12_000, 102, None),
            t("mitosis", 2, 8_000, 103, None),
            t("breast-a", 2, 5_000, 104, Some("breast")),
            t("breast-b", 2, 4_000, 104, Some("breast")),
            t("cells-9c", 9, 4_000, 105, None),
            t("inclusion", 2, 3_500, 106, Some("thyroid")),
            t("prolif", 2, 3_400, 106, Some("thyroid")),
            t("lung-5c", 5, 900, 107, None),
            TaskSpec {
                noise_level: Some(3.5),
                ..t("necrosis", 2, 500, 108, None)
            },
            t("lymph-3c", 3, 400, 109, None),
            t("marrow-6c", 6, 200, 110, None),
        ],
    }
}
