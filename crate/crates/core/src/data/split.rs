use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{manifest_hash, SampleRecord};
use crate::error::{ensure, Result};
use crate::seeding::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<SampleRecord>,
    pub validation: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
    pub seed: u64,
    /// Hash of the record list the split was drawn from.
    pub manifest_hash: String,
}

/// Split membership by source id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub manifest_hash: String,
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn manifest(&self) -> SplitManifest {
        let ids = |v: &[SampleRecord]| v.iter().map(|r| r.source_id.clone()).collect();
        SplitManifest {
            seed: self.seed,
            manifest_hash: self.manifest_hash.clone(),
            train: ids(&self.train),
            validation: ids(&self.validation),
            test: ids(&self.test),
        }
    }
}

/// Draws `n_test_per_race` records of every race into the test split, then
/// `val_fraction` of the remainder into validation; the rest is training data.
/// Each split keeps the input order.
pub fn make_splits(
    records: Vec<SampleRecord>,
    num_races: usize,
    n_test_per_race: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    ensure!((0.0..1.0).contains(&val_fraction), "val_fraction {val_fraction} must lie in [0, 1)");
    let hash = manifest_hash(&records);
    let mut seen = HashSet::new();
    for r in &records {
        ensure!(r.race < num_races, "record {} has race {} outside [0, {num_races})", r.source_id, r.race);
        ensure!(seen.insert(r.source_id.as_str()), "duplicate source id {}", r.source_id);
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Dest {
        Train,
        Val,
        Test,
    }
    let mut dest = vec![Dest::Train; records.len()];
    let mut rng = stream_rng(seed, Stream::Split, 0);
    for race in 0..num_races {
        let mut members: Vec<usize> = (0..records.len()).filter(|&i| records[i].race == race).collect();
        ensure!(
            members.len() > n_test_per_race,
            "race class {race} has {} records, needs more than {n_test_per_race}",
            members.len()
        );
        members.shuffle(&mut rng);
        for &i in &members[..n_test_per_race] {
            dest[i] = Dest::Test;
        }
    }
    let mut rest: Vec<usize> = (0..records.len()).filter(|&i| dest[i] == Dest::Train).collect();
    rest.shuffle(&mut rng);
    let n_val = (val_fraction * rest.len() as f64).round() as usize;
    for &i in &rest[..n_val] {
        dest[i] = Dest::Val;
    }
    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
        manifest_hash: hash,
    };
    for (r, d) in records.into_iter().zip(dest) {
        match d {
            Dest::Train => split.train.push(r),
            Dest::Val => split.validation.push(r),
            Dest::Test => split.test.push(r),
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::Tensor;

    fn records(races: &[usize]) -> Vec<SampleRecord> {
        races
            .iter()
            .enumerate()
            .map(|(i, &race)| SampleRecord {
                image: Tensor::full(&[1, 2, 2], i as f32),
                gender: i % 2,
                race,
                age: None,
                source_id: format!("s{i:05}"),
            })
            .collect()
    }

    #[test]
    fn full_protocol_test_size() {
        let races: Vec<usize> = (0..5000).map(|i| i % 5).collect();
        let s = make_splits(records(&races), 5, 474, 0.1, 1).unwrap();
        assert_eq!(s.test.len(), 2370);
        assert_eq!(s.validation.len(), 263);
        assert_eq!(s.train.len(), 5000 - 2370 - 263);
    }

    #[test]
    fn degenerate_split_keeps_everything_in_train() {
        let s = make_splits(records(&[0, 1, 1, 0]), 2, 0, 0.0, 3).unwrap();
        assert_eq!(s.train.len(), 4);
        assert!(s.validation.is_empty() && s.test.is_empty());
    }

    #[test]
    fn small_class_is_named() {
        let err = make_splits(records(&[0, 0, 0, 1]), 2, 1, 0.0, 3).unwrap_err();
        assert!(err.to_string().contains("race class 1"), "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn splits_are_disjoint_exact_and_deterministic(
            races in prop::collection::vec(0usize..3, 20..120),
            n_test in 0usize..4,
            val in 0.0f64..0.5,
            seed in 0u64..50,
        ) {
            let mut races = races;
            races.extend([0, 1, 2].iter().cycle().take(15));
            let s = make_splits(records(&races), 3, n_test, val, seed).unwrap();
            let m = s.manifest();
            let all: HashSet<&String> = m.train.iter().chain(&m.validation).chain(&m.test).collect();
            prop_assert_eq!(all.len(), races.len());
            for race in 0..3 {
                prop_assert_eq!(s.test.iter().filter(|r| r.race == race).count(), n_test);
            }
            let again = make_splits(records(&races), 3, n_test, val, seed).unwrap();
            prop_assert_eq!(again.manifest(), m);
        }
    }
}
