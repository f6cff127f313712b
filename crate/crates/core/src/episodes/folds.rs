//! Cross-validation folds over the class ids.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_FOLDS: usize = 3;
pub const FOLD_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: [[usize; FOLD_SIZE]; NUM_FOLDS],
    pub test_fold: usize,
}

impl FoldSplit {
    pub fn with_test_fold(&self, test_fold: usize) -> Result<Self> {
        if test_fold >= NUM_FOLDS {
            return Err(Error::Config(format!("test fold {test_fold} not in 0..{NUM_FOLDS}")));
        }
        Ok(FoldSplit {
            folds: self.folds,
            test_fold,
        })
    }

    pub fn test_classes(&self) -> Vec<usize> {
        self.folds[self.test_fold].to_vec()
    }

    pub fn train_classes(&self) -> Vec<usize> {
        (0..NUM_FOLDS)
            .filter(|&f| f != self.test_fold)
            .flat_map(|f| self.folds[f])
            .collect()
    }

    pub fn classes(&self, role: Role) -> Vec<usize> {
        match role {
            Role::Train => self.train_classes(),
            Role::Test => self.test_classes(),
        }
    }
}

/// Seeded shuffle of the twelve class ids, cut into three folds of four.
pub fn make_folds(classes: &[usize], seed: u64, test_fold: usize) -> Result<FoldSplit> {
    let total = NUM_FOLDS * FOLD_SIZE;
    if classes.len() != total {
        return Err(Error::Config(format!("expected {total} classes, got {}", classes.len())));
    }
    let mut sorted = classes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != total {
        return Err(Error::Config("class ids must be distinct".into()));
    }
    let mut ids = classes.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = [[0; FOLD_SIZE]; NUM_FOLDS];
    for (f, chunk) in ids.chunks(FOLD_SIZE).enumerate() {
        folds[f].copy_from_slice(chunk);
    }
    FoldSplit { folds, test_fold: 0 }.with_test_fold(test_fold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn ids() -> Vec<usize> {
        (0..12).collect()
    }

    #[test]
    fn folds_partition_the_classes() {
        for seed in 0..20 {
            let split = make_folds(&ids(), seed, 0).unwrap();
            let all: BTreeSet<usize> = split.folds.iter().flatten().copied().collect();
            assert_eq!(all.len(), 12);
            assert_eq!(all, ids().into_iter().collect());
        }
    }

    #[test]
    fn same_seed_same_split() {
        assert_eq!(make_folds(&ids(), 7, 1).unwrap(), make_folds(&ids(), 7, 1).unwrap());
    }

    #[test]
    fn every_class_tested_exactly_once_across_rotations() {
        let base = make_folds(&ids(), 3, 0).unwrap();
        let mut seen = [0; 12];
        for f in 0..NUM_FOLDS {
            let split = base.with_test_fold(f).unwrap();
            let train: BTreeSet<usize> = split.train_classes().into_iter().collect();
            for c in split.test_classes() {
                assert!(!train.contains(&c));
                seen[c] += 1;
            }
            assert_eq!(train.len(), 8);
        }
        assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn bad_inputs_rejected() {
        assert_eq!(make_folds(&[0, 1, 2], 0, 0).unwrap_err().kind(), "config");
        let mut dup = ids();
        dup[11] = 0;
        assert!(make_folds(&dup, 0, 0).is_err());
        assert!(make_folds(&ids(), 0, 3).is_err());
    }
}
