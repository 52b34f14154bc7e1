//! Deterministic, modality-homogeneous batching.

use alloc::vec::Vec;

use crate::{Error, Result, RngState};

/// Index batches over records whose grouping keys are `keys`.
///
/// The record order is a permutation drawn from `(seed, epoch)`. Records are
/// then split by key (in order of first appearance in the permutation),
/// each group is cut into `batch_size` chunks with the last one possibly
/// short, and the resulting batches are shuffled with the same stream.
pub fn batch_iter<K: PartialEq + Copy>(keys: &[K], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut rng = RngState::with_stream(seed, epoch);
    let mut order: Vec<usize> = (0..keys.len()).collect();
    rng.shuffle(&mut order);
    let mut groups: Vec<(K, Vec<usize>)> = Vec::new();
    for i in order {
        match groups.iter_mut().find(|(k, _)| *k == keys[i]) {
            Some((_, g)) => g.push(i),
            None => groups.push((keys[i], alloc::vec![i])),
        }
    }
    let mut batches: Vec<Vec<usize>> =
        groups.iter().flat_map(|(_, g)| g.chunks(batch_size).map(<[usize]>::to_vec)).collect();
    rng.shuffle(&mut batches);
    Ok(batches)
}
