//! Statistical probes of the synthetic generator: synergy labels carry no
//! signal in either modality alone and are recoverable from both.

use mft_core::data::synth::{aus_with_role, AuRole};
use mft_core::data::{synth_generate, Dataset, SynthSpec};
use nalgebra::{DMatrix, DVector};

fn dataset(seed: u64) -> Dataset {
    let spec = SynthSpec {
        subjects: 20,
        samples_per_subject: 100,
        ..Default::default()
    };
    synth_generate(&spec, seed).unwrap()
}

fn features(ds: &Dataset, modality: &str) -> Vec<Vec<f64>> {
    ds.samples()
        .iter()
        .map(|s| s.modalities[modality].data().to_vec())
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

/// Bias, raw features and either self products (`other = None`) or cross
/// products with `other`.
fn design(x: &[Vec<f64>], other: Option<&[Vec<f64>]>) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = x
        .iter()
        .enumerate()
        .map(|(n, xa)| {
            let mut r = vec![1.0];
            r.extend(xa);
            match other {
                Some(o) => {
                    r.extend(&o[n]);
                    for a in xa {
                        r.extend(o[n].iter().map(|b| a * b));
                    }
                }
                None => {
                    for i in 0..xa.len() {
                        r.extend(xa[i..].iter().map(|b| xa[i] * b));
                    }
                }
            }
            r
        })
        .collect();
    DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

/// Ridge regression onto ±1 targets fitted on the first half of the rows,
/// scored by sign agreement on the second half.
fn held_out_accuracy(x: &DMatrix<f64>, labels: &[u8]) -> f64 {
    let n = x.nrows();
    let half = n / 2;
    let y = DVector::from_iterator(n, labels.iter().map(|&l| 2.0 * f64::from(l) - 1.0));
    let xt = x.rows(0, half);
    let mut gram = xt.transpose() * xt;
    for i in 0..gram.nrows() {
        gram[(i, i)] += 1e-3;
    }
    let rhs = xt.transpose() * y.rows(0, half);
    let w = gram
        .cholesky()
        .expect("ridge system is positive definite")
        .solve(&rhs);
    let pred = x.rows(half, n - half) * w;
    let hits = pred
        .iter()
        .zip(y.rows(half, n - half).iter())
        .filter(|(p, t)| p.signum() == t.signum())
        .count();
    hits as f64 / (n - half) as f64
}

fn label_column(ds: &Dataset, k: usize) -> Vec<u8> {
    ds.samples().iter().map(|s| s.labels[k]).collect()
}

#[test]
fn synergy_labels_are_uncorrelated_with_single_features() {
    let ds = dataset(42);
    for modality in ["alpha", "beta"] {
        let x = features(&ds, modality);
        for k in aus_with_role(12, AuRole::Synergy) {
            let y: Vec<f64> = label_column(&ds, k).iter().map(|&l| f64::from(l)).collect();
            for j in 0..x[0].len() {
                let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
                let r = pearson(&col, &y);
                assert!(r.abs() < 0.1, "AU {} vs {modality}[{j}]: {r}", k + 1);
            }
        }
    }
}

#[test]
fn driven_labels_are_linearly_decodable_from_their_modality() {
    let ds = dataset(42);
    let xa = design(&features(&ds, "alpha"), None);
    let xb = design(&features(&ds, "beta"), None);
    for k in aus_with_role(12, AuRole::AlphaDriven) {
        assert!(held_out_accuracy(&xa, &label_column(&ds, k)) > 0.95);
    }
    for k in aus_with_role(12, AuRole::BetaDriven) {
        assert!(held_out_accuracy(&xb, &label_column(&ds, k)) > 0.95);
    }
}

#[test]
fn synergy_needs_both_modalities() {
    for seed in [42, 7, 1234] {
        let ds = dataset(seed);
        let (fa, fb) = (features(&ds, "alpha"), features(&ds, "beta"));
        let single = [design(&fa, None), design(&fb, None)];
        let joint = design(&fa, Some(&fb));
        for k in aus_with_role(12, AuRole::Synergy) {
            let labels = label_column(&ds, k);
            for x in &single {
                let acc = held_out_accuracy(x, &labels);
                assert!(
                    acc <= 0.55,
                    "seed {seed} AU {}: single-modality probe {acc}",
                    k + 1
                );
            }
            let acc = held_out_accuracy(&joint, &labels);
            assert!(acc >= 0.9, "seed {seed} AU {}: joint probe {acc}", k + 1);
        }
    }
}
