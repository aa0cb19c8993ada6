use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mft_core::config::RunConfig;
use mft_core::data::{synth_to_dir, Dataset, DatasetManifest, SynthSpec};
use mft_core::metrics::{
    prepare_fold, run_ablation, run_fusion_order, run_lambda_sweep, AuId, Experiment, FoldId,
    MetricsReport, SuiteOutcome,
};
use mft_core::model::Checkpoint;
use mft_core::training::{evaluate, fit, gradcheck_model, EpochLog};

use crate::Suite;

pub const CONFIG_ECHO: &str = "config.resolved";
pub const CHECKPOINT: &str = "checkpoint.mft";
pub const EPOCH_LOG: &str = "epochs.log";
pub const TRAIN_REPORT: &str = "report.csv";
pub const EVAL_REPORT: &str = "eval.csv";

/// 2 for numerical failures, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<mft_core::Error>() {
        Some(inner) if inner.is_numerical() => 2,
        _ => 1,
    }
}

/// Line-oriented append-only log that remembers its first write error.
struct LogFile {
    out: BufWriter<File>,
    failed: Option<std::io::Error>,
}

impl LogFile {
    fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(LogFile {
            out: BufWriter::new(f),
            failed: None,
        })
    }

    fn line(&mut self, text: &str) {
        if self.failed.is_none() {
            if let Err(e) = writeln!(self.out, "{text}").and_then(|_| self.out.flush()) {
                self.failed = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<()> {
        if let Some(e) = self.failed.take() {
            return Err(e).context("writing log");
        }
        self.out.flush().context("flushing log")
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    Ok(RunConfig::load(path)?)
}

/// Config plus dataset, with the resolved config echoed into `run.out`.
fn load_run(path: &Path) -> Result<(RunConfig, Dataset)> {
    let mut rc = load_config(path)?;
    let Some(manifest_path) = rc.manifest.clone() else {
        bail!("{}: data.manifest is not set", path.display());
    };
    let manifest = DatasetManifest::load(&manifest_path)?;
    rc.bind_manifest(&manifest)?;
    let ds = manifest.load_dataset()?;
    fs::create_dir_all(&rc.out).with_context(|| format!("creating {}", rc.out.display()))?;
    let echo = rc.out.join(CONFIG_ECHO);
    fs::write(&echo, rc.render()).with_context(|| format!("writing {}", echo.display()))?;
    Ok((rc, ds))
}

fn experiment(rc: &RunConfig) -> Experiment {
    Experiment {
        model: rc.model.clone(),
        train: rc.train.clone(),
        protocol: rc.protocol.clone(),
    }
}

pub fn synth(spec: Option<&Path>, out: &Path, seed: u64) -> Result<ExitCode> {
    let spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SynthSpec::parse(&text)?
        }
        None => SynthSpec::default(),
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = synth_to_dir(&spec, seed, out)?;
    println!(
        "wrote {} samples of {} subjects to {}",
        manifest.rows.len(),
        spec.subjects,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(config: &Path) -> Result<ExitCode> {
    let (rc, ds) = load_run(config)?;
    let (train, test) = prepare_fold(&ds, &rc.protocol, rc.fold)?;
    let mut log = LogFile::create(&rc.out.join(EPOCH_LOG))?;
    let mut sink = |e: &EpochLog| {
        log.line(&e.to_string());
        eprintln!("{e}");
    };
    let outcome = fit(
        &rc.model,
        &rc.variant,
        &train,
        &test,
        &rc.train,
        rc.protocol.threshold,
        &mut sink,
    )?;
    log.finish()?;

    let ck = Checkpoint {
        config: rc.model.clone(),
        variant: rc.variant.clone(),
        params: outcome.params,
    };
    ck.save(&rc.out.join(CHECKPOINT))?;
    let mut report = MetricsReport::new();
    report.push_scores(
        &rc.variant.label(),
        &rc.variant.order_label(&rc.model),
        FoldId::Index(rc.fold),
        &outcome.val_scores,
    );
    report.write(&rc.out.join(TRAIN_REPORT))?;
    println!(
        "{} fold {}: val avg F1 {:.2} after {} steps",
        rc.variant, rc.fold, outcome.val_scores.avg, outcome.steps
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(config: &Path, checkpoint: &Path) -> Result<ExitCode> {
    let (rc, ds) = load_run(config)?;
    let ck = Checkpoint::load(checkpoint)?;
    let (_, test) = prepare_fold(&ds, &rc.protocol, rc.fold)?;
    if test.num_aus() != ck.config.num_aus {
        bail!(
            "checkpoint predicts {} AUs but the dataset has {}",
            ck.config.num_aus,
            test.num_aus()
        );
    }
    let (_, scores) = evaluate(
        &ck.config,
        &ck.variant,
        &ck.params,
        &test,
        rc.train.batch_size,
        rc.protocol.threshold,
    )?;
    let mut report = MetricsReport::new();
    report.push_scores(
        &ck.variant.label(),
        &ck.variant.order_label(&ck.config),
        FoldId::Index(rc.fold),
        &scores,
    );
    report.write(&rc.out.join(EVAL_REPORT))?;
    println!("{} fold {}: avg F1 {:.2}", ck.variant, rc.fold, scores.avg);
    Ok(ExitCode::SUCCESS)
}

fn suite_name(s: Suite) -> &'static str {
    match s {
        Suite::Components => "components",
        Suite::Order => "order",
        Suite::Lambda => "lambda",
    }
}

pub fn ablate(config: &Path, suite: Suite) -> Result<ExitCode> {
    let (rc, ds) = load_run(config)?;
    let name = suite_name(suite);
    let exp = experiment(&rc);
    let mut log = LogFile::create(&rc.out.join(format!("ablate_{name}.log")))?;
    let mut progress = |label: &str, fold: usize, e: &EpochLog| {
        let line = format!("{label} fold={fold} {e}");
        log.line(&line);
        eprintln!("{line}");
    };
    let (report, summary) = match suite {
        Suite::Components => {
            let out = run_ablation(&ds, &exp, &mut progress)?;
            (out.report(), out.summary_report())
        }
        Suite::Order => {
            let out = run_fusion_order(&ds, &exp, &mut progress)?;
            (out.report(), out.summary_report())
        }
        Suite::Lambda => {
            let out = run_lambda_sweep(&ds, &rc.lambda_grid, &exp, &mut progress)?;
            if let Some(((l1, l2), f1)) = out.best() {
                let line = format!("best lambda1={l1} lambda2={l2} avg_f1={f1:.2}");
                log.line(&line);
                println!("{line}");
            }
            let runs = SuiteOutcome {
                runs: out.points.into_iter().map(|(_, r)| r).collect(),
            };
            (runs.report(), runs.summary_report())
        }
    };
    log.finish()?;
    report.write(&rc.out.join(format!("ablate_{name}.csv")))?;
    summary.write(&rc.out.join(format!("ablate_{name}_summary.csv")))?;
    for row in summary.rows.iter().filter(|r| r.au == AuId::Avg) {
        println!("{:<16} {:<16} avg F1 {:.2}", row.variant, row.order, row.f1);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(config: &Path) -> Result<ExitCode> {
    let mut rc = load_config(config)?;
    if let Some(p) = rc.manifest.clone() {
        rc.bind_manifest(&DatasetManifest::load(&p)?)?;
    }
    rc.validate_model()?;
    let started = Instant::now();
    let report = gradcheck_model(&rc.model, &rc.variant, &rc.train, &rc.gradcheck)?;
    let elapsed = started.elapsed();
    let tol = rc.gradcheck.tolerance;
    let mut worst: Vec<_> = report.per_param.iter().collect();
    worst.sort_by(|a, b| b.1.max_rel_err.total_cmp(&a.1.max_rel_err));
    for (name, c) in worst.iter().take(5) {
        println!(
            "{name}: rel_err={:.3e} at [{}] analytic={:.6e} numeric={:.6e}",
            c.max_rel_err, c.worst_index, c.analytic, c.numeric
        );
    }
    let max = report.max_rel_err();
    let values = num_values(&rc)?;
    let verdict = if report.passes(tol) { "PASS" } else { "FAIL" };
    println!(
        "{verdict} max_rel_err={max:.3e} tolerance={tol:e} params={} values={} time={:.1}s",
        report.per_param.len(),
        values,
        elapsed.as_secs_f64()
    );
    Ok(if report.passes(tol) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn num_values(rc: &RunConfig) -> Result<usize> {
    let decls = mft_core::model::declare(&rc.model, &rc.variant)?;
    Ok(decls
        .items
        .iter()
        .map(|d| d.shape.iter().product::<usize>())
        .sum())
}
