use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub const SPLIT_RATIOS: (f64, f64, f64) = (0.70, 0.15, 0.15);
pub const TRAINING_FRACTIONS: [f64; 4] = [1.0, 0.25, 0.06, 0.015];

/// One repeat of subject-level train/validation/test splitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub repeat_index: usize,
    pub seed: u64,
    pub train_subjects: Vec<String>,
    pub val_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub fraction: f64,
    pub effective_train_subjects: Vec<String>,
}

fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let total = ratios.0 + ratios.1 + ratios.2;
    let val = ((ratios.1 / total * n as f64).round() as usize).max(1);
    let test = ((ratios.2 / total * n as f64).round() as usize).max(1);
    let train = n.saturating_sub(val + test).max(1);
    // n >= 3 guarantees the adjustments below terminate with all parts >= 1
    let (mut train, mut val, mut test) = (train, val, test);
    while train + val + test > n {
        if val >= test && val > 1 {
            val -= 1;
        } else if test > 1 {
            test -= 1;
        } else {
            train -= 1;
        }
    }
    (train, val, test)
}

/// Independently shuffled train/val/test splits by subject, one per repeat.
pub fn make_splits(
    subject_ids: &[String],
    repeats: usize,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<SplitPlan>> {
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 3 {
        return Err(Error::Parameter(format!(
            "need at least 3 distinct subjects to split, got {}",
            ids.len()
        )));
    }
    if !(ratios.0 > 0.0 && ratios.1 > 0.0 && ratios.2 > 0.0) {
        return Err(Error::Parameter(format!("split ratios must be positive: {ratios:?}")));
    }
    let (n_train, n_val, _) = split_sizes(ids.len(), ratios);
    Ok((0..repeats)
        .map(|r| {
            let plan_seed = seeding::derive(seed, &["split", &r.to_string()]);
            let mut shuffled = ids.clone();
            shuffled.shuffle(&mut seeding::rng(plan_seed, &["shuffle"]));
            let train = shuffled[..n_train].to_vec();
            SplitPlan {
                repeat_index: r,
                seed: plan_seed,
                val_subjects: shuffled[n_train..n_train + n_val].to_vec(),
                test_subjects: shuffled[n_train + n_val..].to_vec(),
                fraction: 1.0,
                effective_train_subjects: train.clone(),
                train_subjects: train,
            }
        })
        .collect())
}

/// Number of training subjects kept at `fraction`.
pub fn fraction_count(fraction: f64, n_train: usize) -> usize {
    ((fraction * n_train as f64).round() as usize).clamp(1, n_train.max(1))
}

/// Keep the first `max(1, round(fraction * |train|))` subjects of a seeded
/// shuffle of the training set. For a fixed plan, smaller fractions are
/// prefixes of larger ones.
pub fn subsample_training(plan: &SplitPlan, fraction: f64) -> Result<SplitPlan> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "training fraction must be in (0, 1], got {fraction}"
        )));
    }
    let mut order = plan.train_subjects.clone();
    order.shuffle(&mut seeding::rng(plan.seed, &["subsample"]));
    order.truncate(fraction_count(fraction, plan.train_subjects.len()));
    Ok(SplitPlan {
        fraction,
        effective_train_subjects: order,
        ..plan.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn ids(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("patient{i:03}")).collect()
    }

    #[test]
    fn hundred_subjects_split_70_15_15() {
        let plans = make_splits(&ids(100), 3, SPLIT_RATIOS, 42).unwrap();
        assert_eq!(plans.len(), 3);
        for p in &plans {
            assert_eq!(
                (p.train_subjects.len(), p.val_subjects.len(), p.test_subjects.len()),
                (70, 15, 15)
            );
            let all: HashSet<&String> = p
                .train_subjects
                .iter()
                .chain(&p.val_subjects)
                .chain(&p.test_subjects)
                .collect();
            assert_eq!(all.len(), 100);
        }
        assert_ne!(plans[0].test_subjects, plans[1].test_subjects);
        assert_ne!(plans[1].test_subjects, plans[2].test_subjects);
    }

    #[test]
    fn same_seed_same_plans() {
        assert_eq!(
            make_splits(&ids(20), 3, SPLIT_RATIOS, 5).unwrap(),
            make_splits(&ids(20), 3, SPLIT_RATIOS, 5).unwrap()
        );
    }

    #[test]
    fn too_few_subjects() {
        assert!(matches!(
            make_splits(&ids(2), 3, SPLIT_RATIOS, 0),
            Err(Error::Parameter(_))
        ));
        let p = make_splits(&ids(3), 1, SPLIT_RATIOS, 0).unwrap();
        assert_eq!(
            (p[0].train_subjects.len(), p[0].val_subjects.len(), p[0].test_subjects.len()),
            (1, 1, 1)
        );
    }

    #[test]
    fn fractions_of_seventy() {
        let plan = &make_splits(&ids(100), 1, SPLIT_RATIOS, 1).unwrap()[0];
        let counts: Vec<usize> = TRAINING_FRACTIONS
            .iter()
            .map(|&f| subsample_training(plan, f).unwrap().effective_train_subjects.len())
            .collect();
        assert_eq!(counts, vec![70, 18, 4, 1]);
        let full = subsample_training(plan, 1.0).unwrap();
        let mut a = full.effective_train_subjects.clone();
        a.sort();
        let mut b = plan.train_subjects.clone();
        b.sort();
        assert_eq!(a, b);
        assert!(subsample_training(plan, 0.0).is_err());
    }
}
