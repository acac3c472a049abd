//! Manifest of the 22-dataset pathology pool (names, image and class counts),
//! used as a bookkeeping fixture. No pixel data is attached.

use super::{MetricKind, PoolManifest, TaskEntry, TaskId};

pub const PATHOLOGY_TASKS: &[(&str, usize, usize)] = &[
    ("MITOS-ATYPIA 14", 64_873, 3),
    ("Warwick CRC", 2_500, 2),
    ("Janowczyk1", 31_725, 2),
    ("Janowczyk2", 3_402, 2),
    ("Janowczyk5", 24_870, 2),
    ("Janowczyk6", 277_524, 2),
    ("Janowczyk7", 2_244, 3),
    ("Stroma LBP", 2_313, 2),
    ("TUPAC2016 Mitosis", 77_853, 2),
    ("BACH18 Micro", 4_800, 4),
    ("Camelyon16", 292_226, 2),
    ("UMCM Colorectal", 5_000, 8),
    ("Necrosis", 882, 2),
    ("ProliferativePattern", 1_857, 2),
    ("CellInclusion", 3_637, 2),
    ("MouseLba", 4_284, 8),
    ("HumanLba", 5_420, 9),
    ("Lung", 6_331, 10),
    ("Glomeruli", 29_213, 2),
    ("Breast1", 23_032, 2),
    ("Breast2", 17_523, 2),
    ("BoneMarrow", 1_291, 9),
];

pub const RELATED_PAIRS: &[(&str, &str)] = &[("CellInclusion", "ProliferativePattern"), ("Breast1", "Breast2")];

pub fn pathology_manifest() -> PoolManifest {
    let tasks: Vec<TaskEntry> = PATHOLOGY_TASKS
        .iter()
        .enumerate()
        .map(|(i, &(name, samples, classes))| TaskEntry {
            id: TaskId(i as u32),
            name: name.to_string(),
            samples,
            classes,
            metric: MetricKind::for_classes(classes),
            related_group: None,
            seed: None,
            data_file: None,
            meta_file: None,
        })
        .collect();
    let id_of = |n: &str| tasks.iter().find(|t| t.name == n).map(|t| t.id).expect("fixture name");
    let related_groups = RELATED_PAIRS.iter().map(|(a, b)| vec![id_of(a), id_of(b)]).collect();
    let mut manifest = PoolManifest::new(tasks, related_groups);
    for (a, b) in RELATED_PAIRS {
        for t in manifest.tasks.iter_mut().filter(|t| t.name == *a || t.name == *b) {
            t.related_group = Some(format!("{a}+{b}"));
        }
    }
    manifest
}
