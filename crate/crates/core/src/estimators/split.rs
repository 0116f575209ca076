use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};

/// Partition of batch positions `0..B` into an active set and a hold-out set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSplit {
    pub active: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl ActiveSplit {
    /// Validates disjointness and coverage of `0..batch_size`.
    pub fn new(active: Vec<usize>, holdout: Vec<usize>, batch_size: usize) -> Result<Self> {
        let split = Self { active, holdout };
        split.validate(batch_size)?;
        Ok(split)
    }

    pub fn validate(&self, batch_size: usize) -> Result<()> {
        if self.active.len() + self.holdout.len() != batch_size {
            return Err(GpError::InvalidSplit(format!(
                "|A| + |R| = {} but batch has {batch_size} rows",
                self.active.len() + self.holdout.len()
            )));
        }
        let mut seen = vec![false; batch_size];
        for &i in self.active.iter().chain(&self.holdout) {
            if i >= batch_size {
                return Err(GpError::InvalidSplit(format!("index {i} out of range")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(GpError::InvalidSplit(format!("index {i} appears twice")));
            }
        }
        Ok(())
    }

    /// The complement of `holdout` in `0..n` becomes the active set.
    pub fn from_holdout(holdout: Vec<usize>, n: usize) -> Result<Self> {
        let mut mask = vec![false; n];
        for &i in &holdout {
            if i >= n {
                return Err(GpError::InvalidSplit(format!("index {i} out of range")));
            }
            mask[i] = true;
        }
        let active = (0..n).filter(|&i| !mask[i]).collect();
        Self::new(active, holdout, n)
    }

    pub fn batch_size(&self) -> usize {
        self.active.len() + self.holdout.len()
    }
}

/// Uniformly random split with `|A| = active_size`. Both index lists are sorted.
pub fn random_split<R: Rng + ?Sized>(batch_size: usize, active_size: usize, rng: &mut R) -> Result<ActiveSplit> {
    if active_size == 0 || active_size > batch_size {
        return Err(GpError::InvalidSplit(format!(
            "active-set size {active_size} must be in 1..={batch_size}"
        )));
    }
    let mut mask = vec![false; batch_size];
    for i in index::sample(rng, batch_size, active_size) {
        mask[i] = true;
    }
    let (active, holdout): (Vec<usize>, Vec<usize>) = (0..batch_size).partition(|&i| mask[i]);
    Ok(ActiveSplit { active, holdout })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_split_partitions_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = random_split(17, 5, &mut rng).unwrap();
            assert_eq!(s.active.len(), 5);
            assert_eq!(s.holdout.len(), 12);
            s.validate(17).unwrap();
        }
    }

    #[test]
    fn rejects_overlap_and_gaps() {
        assert!(ActiveSplit::new(vec![0, 1], vec![1, 2], 4).is_err());
        assert!(ActiveSplit::new(vec![0], vec![2], 3).is_err());
        assert!(random_split(4, 0, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
        assert!(random_split(4, 5, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn complement_of_holdout() {
        let s = ActiveSplit::from_holdout(vec![3, 1], 5).unwrap();
        assert_eq!(s.active, vec![0, 2, 4]);
    }
}
