use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;

use super::{DataError, FactorizedDataset};
use crate::grad::{Real, Tensor};

/// A training batch in which every supervised factor has a positive pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    /// Dataset indices, distinct.
    pub indices: Vec<usize>,
    /// `B x F` labels, row-major.
    pub labels: Vec<u16>,
    /// Per supervised factor: number of unordered pairs sharing that factor's value.
    pub positive_pairs: Vec<usize>,
}

impl ContrastiveBatch {
    /// Wraps a fixed selection of samples without any repair.
    pub fn from_indices(ds: &FactorizedDataset, indices: &[usize]) -> Self {
        let mut labels = Vec::with_capacity(indices.len() * ds.num_factors());
        for &i in indices {
            labels.extend_from_slice(ds.label_row(i));
        }
        let positive_pairs = ds.supervised().iter().map(|&f| pair_count(ds, indices, f)).collect();
        Self {
            indices: indices.to_vec(),
            labels,
            positive_pairs,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn images<T: Real>(&self, ds: &FactorizedDataset) -> Tensor<T> {
        ds.batch_tensor(&self.indices)
    }

    /// Labels of factor `f` across the batch.
    pub fn factor_labels(&self, f: usize, num_factors: usize) -> Vec<usize> {
        self.labels.chunks(num_factors).map(|row| row[f] as usize).collect()
    }
}

fn pair_count(ds: &FactorizedDataset, batch: &[usize], f: usize) -> usize {
    let mut counts = vec![0usize; ds.specs()[f].cardinality];
    for &i in batch {
        counts[ds.label(i, f)] += 1;
    }
    counts.iter().map(|&c| c * c.saturating_sub(1) / 2).sum()
}

/// Draws `batch_size` distinct samples uniformly from `pool`, then repairs the
/// batch until every supervised factor has a positive pair.
///
/// Repair picks an anchor `q` and a slot `p`, and replaces `p` with an unused
/// pool element agreeing with `q` on every factor that would lack positives
/// without `p` (or on just the first missing factor when no such element
/// exists). Both `p` and `q` are then locked so later repairs cannot undo
/// earlier ones.
pub fn sample_contrastive_batch<R: Rng>(
    ds: &FactorizedDataset,
    pool: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<ContrastiveBatch, DataError> {
    if batch_size < 2 {
        return Err(DataError::Batch(format!("batch size must be at least 2, got {batch_size}")));
    }
    if pool.len() < batch_size {
        return Err(DataError::Batch(format!(
            "pool of {} samples cannot fill a batch of {batch_size}",
            pool.len()
        )));
    }
    let supervised = ds.supervised();
    let mut batch: Vec<usize> = sample(rng, pool.len(), batch_size).into_iter().map(|k| pool[k]).collect();
    let mut locked = vec![false; batch_size];

    loop {
        let missing: Vec<usize> = supervised.iter().copied().filter(|&f| pair_count(ds, &batch, f) == 0).collect();
        let Some(&first) = missing.first() else { break };
        let free: Vec<usize> = (0..batch_size).filter(|&s| !locked[s]).collect();
        if free.len() < 2 {
            return Err(DataError::Batch(format!(
                "cannot repair batch of {batch_size}: factors {missing:?} still lack positives"
            )));
        }
        let q = free[rng.random_range(0..free.len())];
        let p = loop {
            let s = free[rng.random_range(0..free.len())];
            if s != q {
                break s;
            }
        };
        let anchor = batch[q];
        let used: HashSet<usize> = batch.iter().copied().collect();
        let without_p: Vec<usize> = (0..batch_size).filter(|&s| s != p).map(|s| batch[s]).collect();
        let needed: Vec<usize> = supervised.iter().copied().filter(|&f| pair_count(ds, &without_p, f) == 0).collect();
        let matching = |factors: &[usize]| -> Vec<usize> {
            pool.iter()
                .copied()
                .filter(|i| !used.contains(i) && factors.iter().all(|&f| ds.label(*i, f) == ds.label(anchor, f)))
                .collect()
        };
        let mut candidates = matching(&needed);
        if candidates.is_empty() {
            candidates = matching(&[first]);
        }
        if candidates.is_empty() {
            return Err(DataError::Batch(format!(
                "no unused sample shares {} = {} with the anchor",
                ds.specs()[first].name,
                ds.label(anchor, first)
            )));
        }
        batch[p] = candidates[rng.random_range(0..candidates.len())];
        locked[p] = true;
        locked[q] = true;
    }

    let mut labels = Vec::with_capacity(batch_size * ds.num_factors());
    for &i in &batch {
        labels.extend_from_slice(ds.label_row(i));
    }
    let positive_pairs = supervised.iter().map(|&f| pair_count(ds, &batch, f)).collect();
    Ok(ContrastiveBatch {
        indices: batch,
        labels,
        positive_pairs,
    })
}
