use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::seeding::{stream_rng, Stream};

/// How training batches are drawn within an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// A fresh permutation every epoch, cut into consecutive batches.
    #[default]
    Shuffle,
    /// Every batch cycles through the races present, each race walking its own
    /// per-epoch permutation, so races appear equally often.
    RaceBalanced,
}

/// Full batches per epoch; a set smaller than one batch forms a single batch.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    if n >= batch_size {
        n / batch_size
    } else {
        usize::from(n >= 2)
    }
}

/// Index batches of one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_batches(races: &[usize], batch_size: usize, sampling: Sampling, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let n = races.len();
    let count = batches_per_epoch(n, batch_size);
    let size = batch_size.min(n);
    let mut rng = stream_rng(seed, Stream::BatchOrder, epoch as u64);
    match sampling {
        Sampling::Shuffle => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order.chunks(size).take(count).map(<[usize]>::to_vec).collect()
        }
        Sampling::RaceBalanced => {
            let k = races.iter().max().map_or(0, |&m| m + 1);
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
            for (i, &r) in races.iter().enumerate() {
                pools[r].push(i);
            }
            pools.retain(|p| !p.is_empty());
            for p in &mut pools {
                p.shuffle(&mut rng);
            }
            let classes = pools.len();
            (0..count)
                .map(|b| {
                    (0..size)
                        .map(|s| {
                            let pos = b * size + s;
                            let pool = &pools[pos % classes];
                            pool[(pos / classes) % pool.len()]
                        })
                        .collect()
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_visits_each_index_at_most_once() {
        let races = vec![0; 103];
        let b = epoch_batches(&races, 10, Sampling::Shuffle, 1, 0);
        assert_eq!(b.len(), 10);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
        assert_eq!(b, epoch_batches(&races, 10, Sampling::Shuffle, 1, 0));
        assert_ne!(b, epoch_batches(&races, 10, Sampling::Shuffle, 1, 1));
    }

    #[test]
    fn balanced_batches_cover_races_evenly() {
        let races: Vec<usize> = (0..500).map(|i| if i < 440 { 0 } else { 1 + i % 4 }).collect();
        for batch in epoch_batches(&races, 20, Sampling::RaceBalanced, 3, 2) {
            let mut counts = [0; 5];
            for i in batch {
                counts[races[i]] += 1;
            }
            assert_eq!(counts, [4; 5]);
        }
    }

    #[test]
    fn tiny_sets_form_one_batch() {
        assert_eq!(batches_per_epoch(3, 32), 1);
        assert_eq!(batches_per_epoch(1, 32), 0);
        assert_eq!(epoch_batches(&[0, 1, 0], 32, Sampling::Shuffle, 0, 0)[0].len(), 3);
    }
}
