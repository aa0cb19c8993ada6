use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::dataset::Dataset;

/// Subject-exclusive fold assignment. Folds are numbered `1..=k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldSplit {
    k: usize,
    assignments: BTreeMap<String, usize>,
}

/// Shuffles the distinct subjects with `seed` and deals them round-robin
/// into `k` folds. The result does not depend on the input order.
pub fn subject_folds(subjects: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Contract(format!("need at least 2 folds, got {k}")));
    }
    let mut unique: Vec<&String> = subjects.iter().collect();
    unique.sort();
    unique.dedup();
    if unique.len() < k {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {k} folds",
            unique.len()
        )));
    }
    Rng::new(seed).shuffle(&mut unique);
    let assignments = unique
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i % k + 1))
        .collect();
    Ok(FoldSplit { k, assignments })
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.assignments.get(subject).copied()
    }

    pub fn assignments(&self) -> &BTreeMap<String, usize> {
        &self.assignments
    }

    pub fn test_subjects(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        (1..=self.k).map(|f| self.test_subjects(f).len()).collect()
    }

    /// Sample indices of the training and test parts of `fold`.
    pub fn split(&self, ds: &Dataset, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(1..=self.k).contains(&fold) {
            return Err(Error::Config(format!("fold {fold} outside 1..={}", self.k)));
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, s) in ds.samples().iter().enumerate() {
            match self.fold_of(&s.subject) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => {
                    return Err(Error::Config(format!(
                        "sample {} has subject {} outside the fold assignment",
                        s.id, s.subject
                    )))
                }
            }
        }
        if train.is_empty() || test.is_empty() {
            return Err(Error::Config(format!("fold {fold} leaves an empty split")));
        }
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i:02}")).collect()
    }

    #[test]
    fn sizes() {
        let f = subject_folds(&names(6), 3, 1).unwrap();
        assert_eq!(f.fold_sizes(), vec![2, 2, 2]);
        let f = subject_folds(&names(41), 3, 1).unwrap();
        let mut sizes = f.fold_sizes();
        sizes.sort();
        assert_eq!(sizes, vec![13, 14, 14]);
    }

    #[test]
    fn deterministic_and_order_free() {
        let a = subject_folds(&names(10), 3, 5).unwrap();
        let mut rev = names(10);
        rev.reverse();
        assert_eq!(a, subject_folds(&rev, 3, 5).unwrap());
        assert_eq!(a, subject_folds(&names(10), 3, 5).unwrap());
    }

    #[test]
    fn errors() {
        assert!(subject_folds(&names(5), 1, 0).is_err());
        assert!(subject_folds(&names(2), 3, 0).is_err());
    }
}
