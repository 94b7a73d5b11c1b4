use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Stratified k-fold assignment: each class is shuffled under `seed` and
/// dealt round-robin, so per-class fold sizes differ by at most one.
/// Returns the validation fold of every record.
pub fn make_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; labels.len()];
    // the deal continues across classes so small folds do not pile up at 0
    let mut next = 0;
    for (class, mut members) in by_class {
        if members.len() < k {
            return Err(Error::Data(format!(
                "class {class} has {} records, fewer than k = {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            fold[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(fold)
}

/// `(train, validation)` record indices for fold `f`.
pub fn split_fold(assignment: &[usize], f: usize) -> (Vec<usize>, Vec<usize>) {
    (0..assignment.len()).partition(|&i| assignment[i] != f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn brats_2018_split() {
        let labels: Vec<usize> = (0..285).map(|i| usize::from(i < 210)).collect();
        let f = make_folds(&labels, 5, 0).unwrap();
        for fold in 0..5 {
            let (_, val) = split_fold(&f, fold);
            let hgg = val.iter().filter(|&&i| labels[i] == 1).count();
            assert_eq!(hgg, 42);
            assert_eq!(val.len() - hgg, 15);
        }
        assert_eq!(f, make_folds(&labels, 5, 0).unwrap());
        assert_ne!(f, make_folds(&labels, 5, 1).unwrap());
    }

    #[test]
    fn small_class_is_an_error() {
        assert!(make_folds(&[0, 0, 0, 1, 1, 1, 1, 1], 5, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_records(n0 in 5usize..40, n1 in 5usize..40, k in 2usize..6, seed: u64) {
            let labels: Vec<usize> = (0..n0 + n1).map(|i| usize::from(i >= n0)).collect();
            let f = make_folds(&labels, k, seed).unwrap();
            let mut seen = vec![0; labels.len()];
            for fold in 0..k {
                let (train, val) = split_fold(&f, fold);
                prop_assert_eq!(train.len() + val.len(), labels.len());
                for i in val {
                    seen[i] += 1;
                }
                for c in 0..2 {
                    let n = if c == 0 { n0 } else { n1 };
                    let cnt = split_fold(&f, fold).1.iter().filter(|&&i| labels[i] == c).count();
                    prop_assert!(cnt == n / k || cnt == n / k + 1);
                }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }
    }
}
