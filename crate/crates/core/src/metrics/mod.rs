//! F1 scoring, reports and experiment drivers.

mod experiments;
mod f1;
mod report;

pub use experiments::{
    lambda_label, prepare_fold, run_ablation, run_cv, run_fold, run_fusion_order, run_lambda_sweep,
    CvOutcome, Experiment, FoldAggregation, FoldResult, Progress, Protocol, SuiteOutcome,
    SweepOutcome, ABLATION_VARIANTS, LAMBDA_GRID,
};
pub use f1::{confusion, f1_scores, Confusion, F1Scores};
pub use report::{AuId, FoldId, MetricsReport, ReportRow, CSV_HEADER};
