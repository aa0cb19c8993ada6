//! Cross-validation and the comparison suites built on it.

use std::fmt;
use std::str::FromStr;

use crate::data::{subject_folds, zscore, Dataset, Standardize};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::params::ParameterStore;
use crate::training::{fit, EpochLog, TrainConfig};

use super::f1::{confusion, Confusion, F1Scores};
use super::report::{FoldId, MetricsReport};

/// How per-fold results combine into one score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FoldAggregation {
    /// Arithmetic mean of per-fold F1.
    Mean,
    /// F1 of the summed confusion counts.
    Pooled,
}

impl fmt::Display for FoldAggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FoldAggregation::Mean => "mean",
            FoldAggregation::Pooled => "pooled",
        })
    }
}

impl FromStr for FoldAggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(FoldAggregation::Mean),
            "pooled" => Ok(FoldAggregation::Pooled),
            other => Err(format!("expected mean or pooled, got {other:?}")),
        }
    }
}

/// Fold layout and scoring shared by every run of a suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Protocol {
    pub folds: usize,
    pub fold_seed: u64,
    /// Restrict to these 1-based folds; `None` runs all of them.
    pub only_folds: Option<Vec<usize>>,
    pub standardize: Standardize,
    pub threshold: f64,
    pub aggregation: FoldAggregation,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            folds: 3,
            fold_seed: 0,
            only_folds: None,
            standardize: Standardize::Scalar,
            threshold: 0.5,
            aggregation: FoldAggregation::Mean,
        }
    }
}

impl Protocol {
    pub fn selected_folds(&self) -> Vec<usize> {
        self.only_folds
            .clone()
            .unwrap_or_else(|| (1..=self.folds).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: Protocol,
}

/// Training and test parts of one fold, standardized with statistics of
/// the training part.
pub fn prepare_fold(ds: &Dataset, protocol: &Protocol, fold: usize) -> Result<(Dataset, Dataset)> {
    let split = subject_folds(&ds.subjects(), protocol.folds, protocol.fold_seed)?;
    let (train_idx, test_idx) = split.split(ds, fold)?;
    let mut train = ds.subset(&train_idx);
    let mut test = ds.subset(&test_idx);
    let stats = zscore(&train, protocol.standardize)?;
    stats.apply_dataset(&mut train)?;
    stats.apply_dataset(&mut test)?;
    Ok((train, test))
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub fold: usize,
    pub scores: F1Scores,
    pub confusion: Vec<Confusion>,
    pub log: Vec<EpochLog>,
    pub params: ParameterStore,
}

pub fn run_fold(
    ds: &Dataset,
    variant: &Variant,
    exp: &Experiment,
    fold: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FoldResult> {
    let (train, test) = prepare_fold(ds, &exp.protocol, fold)?;
    let out = fit(
        &exp.model,
        variant,
        &train,
        &test,
        &exp.train,
        exp.protocol.threshold,
        on_epoch,
    )?;
    let confusion = confusion(&out.val_probs, &test.labels(), exp.protocol.threshold)?;
    Ok(FoldResult {
        fold,
        scores: out.val_scores,
        confusion,
        log: out.log,
        params: out.params,
    })
}

#[derive(Clone, Debug)]
pub struct CvOutcome {
    /// Label written to the report's `variant` column.
    pub label: String,
    pub order: String,
    pub folds: Vec<FoldResult>,
    /// Fold-aggregated scores.
    pub summary: F1Scores,
}

impl CvOutcome {
    /// One block of per-AU rows and an `avg` row per fold.
    pub fn report(&self) -> MetricsReport {
        let mut r = MetricsReport::new();
        for f in &self.folds {
            r.push_scores(&self.label, &self.order, FoldId::Index(f.fold), &f.scores);
        }
        r
    }

    pub fn summary_report(&self) -> MetricsReport {
        let mut r = MetricsReport::new();
        r.push_scores(&self.label, &self.order, FoldId::All, &self.summary);
        r
    }
}

fn aggregate(folds: &[FoldResult], how: FoldAggregation) -> F1Scores {
    match how {
        FoldAggregation::Mean => {
            let c = folds[0].scores.per_au.len();
            let per_au = (0..c)
                .map(|k| folds.iter().map(|f| f.scores.per_au[k]).sum::<f64>() / folds.len() as f64)
                .collect();
            F1Scores::from_per_au(per_au)
        }
        FoldAggregation::Pooled => {
            let mut total = folds[0].confusion.clone();
            for f in &folds[1..] {
                for (t, c) in total.iter_mut().zip(&f.confusion) {
                    *t += *c;
                }
            }
            F1Scores::from_confusion(&total)
        }
    }
}

/// Progress sink: `(run label, fold, epoch line)`.
pub type Progress<'a> = dyn FnMut(&str, usize, &EpochLog) + 'a;

fn run_labelled(
    ds: &Dataset,
    variant: &Variant,
    label: String,
    exp: &Experiment,
    progress: &mut Progress<'_>,
) -> Result<CvOutcome> {
    let folds = exp.protocol.selected_folds();
    if folds.is_empty() {
        return Err(Error::Config("no folds selected".into()));
    }
    let mut results = Vec::with_capacity(folds.len());
    for fold in folds {
        let mut sink = |e: &EpochLog| progress(&label, fold, e);
        results.push(run_fold(ds, variant, exp, fold, &mut sink)?);
    }
    Ok(CvOutcome {
        order: variant.order_label(&exp.model),
        summary: aggregate(&results, exp.protocol.aggregation),
        label,
        folds: results,
    })
}

/// Trains and scores `variant` on every selected fold.
pub fn run_cv(
    ds: &Dataset,
    variant: &Variant,
    exp: &Experiment,
    progress: &mut Progress<'_>,
) -> Result<CvOutcome> {
    run_labelled(ds, variant, variant.label(), exp, progress)
}

/// Several cross-validated runs reported together.
#[derive(Clone, Debug, Default)]
pub struct SuiteOutcome {
    pub runs: Vec<CvOutcome>,
}

impl SuiteOutcome {
    pub fn report(&self) -> MetricsReport {
        let mut r = MetricsReport::new();
        for run in &self.runs {
            r.extend(run.report());
        }
        r
    }

    pub fn summary_report(&self) -> MetricsReport {
        let mut r = MetricsReport::new();
        for run in &self.runs {
            r.extend(run.summary_report());
        }
        r
    }

    pub fn run(&self, label: &str, order: &str) -> Option<&CvOutcome> {
        self.runs
            .iter()
            .find(|r| r.label == label && r.order == order)
    }
}

/// Component ablation, in order of increasing machinery.
pub const ABLATION_VARIANTS: [Variant; 4] = [
    Variant::LateFusion,
    Variant::LateFusionTe,
    Variant::FtOnly,
    Variant::Full,
];

pub fn run_ablation(
    ds: &Dataset,
    exp: &Experiment,
    progress: &mut Progress<'_>,
) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::default();
    for v in &ABLATION_VARIANTS {
        out.runs.push(run_cv(ds, v, exp, progress)?);
    }
    Ok(out)
}

/// The full model with the configured fusion order and with it reversed.
pub fn run_fusion_order(
    ds: &Dataset,
    exp: &Experiment,
    progress: &mut Progress<'_>,
) -> Result<SuiteOutcome> {
    let mut out = SuiteOutcome::default();
    out.runs.push(run_cv(ds, &Variant::Full, exp, progress)?);
    let mut swapped = exp.clone();
    swapped.model.fusion_order.reverse();
    out.runs
        .push(run_cv(ds, &Variant::Full, &swapped, progress)?);
    Ok(out)
}

/// `(λ₁, λ₂)` grid of the loss-balance sweep; the pairs need not sum to 1.
pub const LAMBDA_GRID: [(f64, f64); 8] = [
    (0.2, 0.8),
    (0.3, 0.7),
    (0.4, 0.6),
    (0.5, 0.5),
    (0.6, 0.4),
    (0.7, 0.3),
    (0.8, 0.2),
    (1.0, 0.5),
];

pub fn lambda_label(lambda1: f64, lambda2: f64) -> String {
    format!("full@{lambda1}/{lambda2}")
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub points: Vec<((f64, f64), CvOutcome)>,
}

impl SweepOutcome {
    pub fn report(&self) -> MetricsReport {
        let mut r = MetricsReport::new();
        for (_, run) in &self.points {
            r.extend(run.report());
        }
        r
    }

    /// Grid point with the highest average F1; ties go to the earlier point.
    pub fn best(&self) -> Option<((f64, f64), f64)> {
        self.points
            .iter()
            .map(|(l, run)| (*l, run.summary.avg))
            .fold(None, |best, cur| match best {
                Some((_, b)) if b >= cur.1 => best,
                _ => Some(cur),
            })
    }
}

/// Full model per grid point, on fold 1 only.
pub fn run_lambda_sweep(
    ds: &Dataset,
    grid: &[(f64, f64)],
    exp: &Experiment,
    progress: &mut Progress<'_>,
) -> Result<SweepOutcome> {
    if grid.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let mut points = Vec::with_capacity(grid.len());
    for &(l1, l2) in grid {
        let mut e = exp.clone();
        e.train.lambda1 = l1;
        e.train.lambda2 = l2;
        e.protocol.only_folds = Some(vec![1]);
        let run = run_labelled(ds, &Variant::Full, lambda_label(l1, l2), &e, progress)?;
        points.push(((l1, l2), run));
    }
    Ok(SweepOutcome { points })
}
