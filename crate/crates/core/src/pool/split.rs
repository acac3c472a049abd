use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::Splits;
use crate::error::{Error, Result};

/// Train/validation/test proportions, applied to groups rather than samples.
pub const SPLIT_RATIOS: (f64, f64, f64) = (0.6, 0.2, 0.2);

const MAX_ATTEMPTS: usize = 200;

/// Assigns whole groups to train/val/test so that no group straddles two
/// splits and every class has at least one training sample.
pub fn grouped_split<R: Rng>(groups: &[u32], labels: &[usize], classes: usize, rng: &mut R) -> Result<Splits> {
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let n_groups = members.len();
    if n_groups < 3 {
        return Err(Error::InvalidConfig(format!(
            "need at least 3 groups for a train/val/test split, got {n_groups}"
        )));
    }
    let n_val = ((n_groups as f64 * SPLIT_RATIOS.1).round() as usize).max(1);
    let n_test = ((n_groups as f64 * SPLIT_RATIOS.2).round() as usize).max(1);
    let n_train = n_groups - n_val - n_test;
    let keys: Vec<u32> = members.keys().copied().collect();
    for _ in 0..MAX_ATTEMPTS {
        let mut order = keys.clone();
        order.shuffle(rng);
        let pick = |range: &[u32]| {
            let mut idx: Vec<usize> = range.iter().flat_map(|g| members[g].iter().copied()).collect();
            idx.sort_unstable();
            idx
        };
        let train = pick(&order[..n_train]);
        let mut present = vec![false; classes];
        for &i in &train {
            present[labels[i]] = true;
        }
        if present.iter().all(|&p| p) {
            return Ok(Splits {
                train,
                val: pick(&order[n_train..n_train + n_val]),
                test: pick(&order[n_train + n_val..]),
            });
        }
    }
    Err(Error::InvalidConfig(
        "could not find a grouped split with every class in the training set".into(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    proptest! {
        #[test]
        fn groups_never_straddle_splits(
            seed in 0u64..1000,
            n in 30usize..200,
            group_size in 1usize..12,
        ) {
            let groups: Vec<u32> = (0..n).map(|i| (i / group_size) as u32).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            prop_assume!(n / group_size >= 5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = grouped_split(&groups, &labels, 2, &mut rng).unwrap();
            let sets: Vec<BTreeSet<u32>> = [&s.train, &s.val, &s.test]
                .iter()
                .map(|idx| idx.iter().map(|&i| groups[i]).collect())
                .collect();
            prop_assert!(sets[0].is_disjoint(&sets[1]));
            prop_assert!(sets[0].is_disjoint(&sets[2]));
            prop_assert!(sets[1].is_disjoint(&sets[2]));
            prop_assert_eq!(s.train.len() + s.val.len() + s.test.len(), n);
        }
    }

    #[test]
    fn too_few_groups_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(grouped_split(&[0, 0, 1, 1], &[0, 1, 0, 1], 2, &mut rng).is_err());
    }
}
