use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use crate::tensor::Tensor;

/// Per-AU positive weights of the weighted BCE loss.
///
/// `P(AU_k)` is AU `k`'s share of all positive labels and
/// `p_k = P(AU_k) / min_x P(AU_x)`, so `min_k p_k == 1` exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    p: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(num_aus: usize) -> Self {
        ClassWeights {
            p: vec![1.0; num_aus],
        }
    }

    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|&w| !(w >= 1.0 && w.is_finite())) {
            return Err(Error::Config(format!(
                "class weights must all be >= 1, got {p:?}"
            )));
        }
        Ok(ClassWeights { p })
    }

    pub fn values(&self) -> &[f64] {
        &self.p
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Class weights from an `N × C` binary label matrix.
///
/// With `invert` the conventional inverse-frequency weighting
/// `p_k = max_x P(AU_x) / P(AU_k)` is returned instead; it also has
/// minimum exactly 1.
pub fn compute_class_weights(labels: &[Vec<u8>], invert: bool) -> Result<ClassWeights> {
    let c = labels
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Config("class weights need at least one sample".into()))?;
    let mut counts = vec![0u64; c];
    for (i, row) in labels.iter().enumerate() {
        if row.len() != c {
            return Err(Error::shape(
                "class_weights",
                format!("row {i} has {} labels, expected {c}", row.len()),
            ));
        }
        for (k, &y) in row.iter().enumerate() {
            counts[k] += u64::from(y);
        }
    }
    if let Some(k) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!(
            "AU {} has no positive labels in the training split",
            k + 1
        )));
    }
    let total: u64 = counts.iter().sum();
    let freq: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let p = if invert {
        let max = freq.iter().copied().fold(f64::MIN, f64::max);
        freq.iter()
            .map(|&f| if f == max { 1.0 } else { max / f })
            .collect()
    } else {
        let min = freq.iter().copied().fold(f64::MAX, f64::min);
        freq.iter()
            .map(|&f| if f == min { 1.0 } else { f / min })
            .collect()
    };
    Ok(ClassWeights { p })
}

/// `-(1/B) Σ_i Σ_k [p_k y log ŷ + (1 - y) log(1 - ŷ)]` with `ŷ` clamped
/// to `[eps, 1 - eps]`. The AU sum is not normalized by `C`.
///
/// `probs` is `[B, C]` or `[C]`; `targets` has the same shape.
pub fn weighted_bce(
    g: &mut Graph,
    probs: Var,
    targets: &Tensor,
    weights: &ClassWeights,
    eps: f64,
) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape != targets.shape() {
        return Err(Error::shape(
            "weighted_bce",
            format!("probabilities {shape:?} vs targets {:?}", targets.shape()),
        ));
    }
    let c = *shape.last().unwrap();
    if c != weights.len() {
        return Err(Error::shape(
            "weighted_bce",
            format!("{c} AUs but {} class weights", weights.len()),
        ));
    }
    let batch = targets.numel() / c;
    let p = weights.values();
    let pos: Vec<f64> = targets
        .data()
        .iter()
        .enumerate()
        .map(|(i, &y)| p[i % c] * y)
        .collect();
    let neg: Vec<f64> = targets.data().iter().map(|&y| 1.0 - y).collect();
    let pos = g.constant(Tensor::new(shape.clone(), pos)?);
    let neg = g.constant(Tensor::new(shape, neg)?);

    let clamped = g.clamp(probs, eps, 1.0 - eps)?;
    let log_p = g.log(clamped)?;
    let one_minus = g.scale_shift(clamped, -1.0, 1.0)?;
    let log_q = g.log(one_minus)?;
    let a = g.mul(log_p, pos)?;
    let b = g.mul(log_q, neg)?;
    let terms = g.add(a, b)?;
    let total = g.sum_all(terms)?;
    g.scale(total, -1.0 / batch as f64)
}

/// `λ₁ L_fusion + λ₂ L_β`.
pub fn combined_loss(
    g: &mut Graph,
    fusion: Var,
    beta: Var,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    let a = g.scale(fusion, lambda1)?;
    let b = g.scale(beta, lambda2)?;
    g.add(a, b)
}

/// Scalar form of [`combined_loss`].
pub fn combine(fusion: f64, beta: f64, lambda1: f64, lambda2: f64) -> f64 {
    lambda1 * fusion + lambda2 * beta
}
