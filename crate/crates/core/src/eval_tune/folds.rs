//! Session-grouped k-fold assignment.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Fold index of each row.
    pub fold_of_row: Vec<usize>,
}

impl FoldPlan {
    pub fn validation_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_row.len()).filter(|&i| self.fold_of_row[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of_row.len()).filter(|&i| self.fold_of_row[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of_row {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Assigns whole groups to folds. Groups are shuffled by `seed`, ordered by
/// row count (largest first, stable) and each is dealt to the currently
/// lightest fold.
pub fn group_kfold<S: AsRef<str>>(groups: &[S], k: usize, seed: u64) -> Result<FoldPlan, EvalError> {
    if k < 2 {
        return Err(EvalError::Folds(format!("k must be at least 2, got {k}")));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut names: Vec<&str> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    let mut row_group = Vec::with_capacity(groups.len());
    for g in groups {
        let g = g.as_ref();
        let id = *index.entry(g).or_insert_with(|| {
            names.push(g);
            sizes.push(0);
            names.len() - 1
        });
        sizes[id] += 1;
        row_group.push(id);
    }
    if names.len() < k {
        return Err(EvalError::Folds(format!("{} distinct groups for {k} folds", names.len())));
    }
    // first-appearance order depends on row order only; sort names so the
    // plan depends on the group multiset and the seed
    let mut order: Vec<usize> = (0..names.len()).collect();
    order.sort_by(|&a, &b| names[a].cmp(names[b]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]));

    let mut load = vec![0usize; k];
    let mut fold_of_group = vec![0usize; names.len()];
    for g in order {
        let f = (0..k).min_by_key(|&f| (load[f], f)).unwrap();
        fold_of_group[g] = f;
        load[f] += sizes[g];
    }
    Ok(FoldPlan { k, fold_of_row: row_group.into_iter().map(|g| fold_of_group[g]).collect() })
}
