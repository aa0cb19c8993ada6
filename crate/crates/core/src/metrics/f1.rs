use std::ops::AddAssign;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// `2TP / (2TP + FP + FN) · 100`, or 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            200.0 * self.tp as f64 / denom as f64
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Per-AU F1 on the 0-100 scale and their mean.
#[derive(Clone, Debug, PartialEq)]
pub struct F1Scores {
    pub per_au: Vec<f64>,
    pub avg: f64,
}

impl F1Scores {
    pub fn from_per_au(per_au: Vec<f64>) -> Self {
        let avg = if per_au.is_empty() {
            0.0
        } else {
            per_au.iter().sum::<f64>() / per_au.len() as f64
        };
        F1Scores { per_au, avg }
    }

    pub fn from_confusion(c: &[Confusion]) -> Self {
        Self::from_per_au(c.iter().map(Confusion::f1).collect())
    }

    /// Mean over `idx` (0-based AU indices).
    pub fn mean_over(&self, idx: &[usize]) -> f64 {
        idx.iter().map(|&k| self.per_au[k]).sum::<f64>() / idx.len().max(1) as f64
    }
}

/// Per-AU confusion counts with prediction `prob >= threshold`.
pub fn confusion(
    probs: &[Vec<f64>],
    targets: &[Vec<u8>],
    threshold: f64,
) -> Result<Vec<Confusion>> {
    if probs.len() != targets.len() {
        return Err(Error::shape(
            "f1_scores",
            format!("{} predictions vs {} targets", probs.len(), targets.len()),
        ));
    }
    let c = targets.first().map_or(0, Vec::len);
    let mut out = vec![Confusion::default(); c];
    for (i, (p, y)) in probs.iter().zip(targets).enumerate() {
        if p.len() != c || y.len() != c {
            return Err(Error::shape("f1_scores", format!("row {i} width mismatch")));
        }
        for k in 0..c {
            let cell = &mut out[k];
            match (p[k] >= threshold, y[k] != 0) {
                (true, true) => cell.tp += 1,
                (true, false) => cell.fp += 1,
                (false, true) => cell.fn_ += 1,
                (false, false) => cell.tn += 1,
            }
        }
    }
    Ok(out)
}

pub fn f1_scores(probs: &[Vec<f64>], targets: &[Vec<u8>], threshold: f64) -> Result<F1Scores> {
    Ok(F1Scores::from_confusion(&confusion(
        probs, targets, threshold,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = vec![vec![1, 0], vec![0, 1]];
        let p = vec![vec![0.9, 0.1], vec![0.2, 0.7]];
        let s = f1_scores(&p, &y, 0.5).unwrap();
        assert_eq!(s.per_au, vec![100.0, 100.0]);
        assert_eq!(s.avg, 100.0);
    }

    #[test]
    fn hand_case() {
        let y = vec![vec![1], vec![0]];
        let p = vec![vec![0.6], vec![0.5]];
        let s = f1_scores(&p, &y, 0.5).unwrap();
        assert!((s.per_au[0] - 200.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_au_scores_zero() {
        let y = vec![vec![0], vec![0]];
        let p = vec![vec![0.1], vec![0.2]];
        assert_eq!(f1_scores(&p, &y, 0.5).unwrap().per_au, vec![0.0]);
    }
}
