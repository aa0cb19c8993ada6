use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{f1_scores, F1Scores};
use crate::model::{
    forward, init_params, probabilities, Inputs, Logits, ModelConfig, Variant, FUSION_PIPELINE,
};
use crate::params::{ParameterStore, Session};
use crate::rng::Rng;
use crate::tape::{Mode, Var};
use crate::tensor::Tensor;

use super::loss::{combined_loss, compute_class_weights, weighted_bce, ClassWeights};
use super::optim::{sgd_step, OptimizerState};
use super::{lr_at_epoch, TrainConfig};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-head training loss, labelled by pipeline.
    pub heads: Vec<(String, f64)>,
    /// Mean of the optimized objective.
    pub loss: f64,
    pub val_f1: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Ten significant digits hide the noise of repeated decay products.
        let lr: f64 = format!("{:.9e}", self.lr).parse().unwrap_or(self.lr);
        write!(f, "epoch={} lr={lr:e}", self.epoch)?;
        for (name, v) in &self.heads {
            write!(f, " loss_{name}={v:.6}")?;
        }
        write!(f, " loss={:.6} val_f1={:.4}", self.loss, self.val_f1)
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub params: ParameterStore,
    pub log: Vec<EpochLog>,
    pub class_weights: ClassWeights,
    /// Objective on the very first mini-batch, before any update.
    pub first_step_loss: f64,
    pub steps: usize,
    /// Final-epoch validation probabilities and scores.
    pub val_probs: Vec<Vec<f64>>,
    pub val_scores: F1Scores,
}

fn head_labels(cfg: &ModelConfig, variant: &Variant) -> Vec<String> {
    match variant {
        Variant::Single(m) => vec![m.clone()],
        Variant::Full | Variant::FtOnly => {
            vec![
                FUSION_PIPELINE.to_string(),
                cfg.fusion_order.get(1).cloned().unwrap_or_default(),
            ]
        }
        Variant::LateFusion | Variant::LateFusionTe => cfg.fusion_order.clone(),
    }
}

fn batch_vars(s: &mut Session<'_>, ds: &Dataset, idx: &[usize]) -> Result<(Inputs, Tensor)> {
    let batch = ds.batch(idx)?;
    let inputs = batch
        .inputs
        .into_iter()
        .map(|(k, t)| (k, s.input(t)))
        .collect();
    Ok((inputs, batch.targets))
}

/// Optimized objective and per-head losses for one batch: the weighted
/// combined loss for dual models, the sum of both branch losses for late
/// fusion, and the plain weighted BCE for single models.
pub fn objective(
    s: &mut Session<'_>,
    logits: Logits,
    targets: &Tensor,
    weights: &ClassWeights,
    tc: &TrainConfig,
) -> Result<(Var, Vec<Var>)> {
    let head = |s: &mut Session<'_>, x: Var| -> Result<Var> {
        let p = s.graph.sigmoid(x)?;
        weighted_bce(&mut s.graph, p, targets, weights, tc.eps_clamp)
    };
    match logits {
        Logits::Single(x) => {
            let l = head(s, x)?;
            Ok((l, vec![l]))
        }
        Logits::Dual { fusion, beta } => {
            let lf = head(s, fusion)?;
            let lb = head(s, beta)?;
            let l = combined_loss(&mut s.graph, lf, lb, tc.lambda1, tc.lambda2)?;
            Ok((l, vec![lf, lb]))
        }
        Logits::Late { first, second } => {
            let la = head(s, first)?;
            let lb = head(s, second)?;
            let l = s.graph.add(la, lb)?;
            Ok((l, vec![la, lb]))
        }
    }
}

fn at_step(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, step {step})")),
        other => other,
    }
}

/// Probabilities for every sample of `ds`, in order, with dropout off.
pub fn predict(
    cfg: &ModelConfig,
    variant: &Variant,
    params: &ParameterStore,
    ds: &Dataset,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let c = ds.num_aus();
    let mut out = Vec::with_capacity(ds.len());
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let mut s = Session::new(params);
        let (inputs, _) = batch_vars(&mut s, ds, chunk)?;
        let logits = forward(&mut s, cfg, variant, &inputs, &mut Mode::Eval)?;
        let p = probabilities(&mut s, cfg, logits)?;
        out.extend(s.graph.value(p).data().chunks(c).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// [`predict`] followed by per-AU F1 at `threshold`.
pub fn evaluate(
    cfg: &ModelConfig,
    variant: &Variant,
    params: &ParameterStore,
    ds: &Dataset,
    batch_size: usize,
    threshold: f64,
) -> Result<(Vec<Vec<f64>>, F1Scores)> {
    let probs = predict(cfg, variant, params, ds, batch_size)?;
    let scores = f1_scores(&probs, &ds.labels(), threshold)?;
    Ok((probs, scores))
}

/// Trains `variant` from a fresh seeded initialization for `tc.epochs`
/// epochs and scores `val` after each one. `on_epoch` sees every log line
/// as soon as it is produced.
pub fn fit(
    cfg: &ModelConfig,
    variant: &Variant,
    train: &Dataset,
    val: &Dataset,
    tc: &TrainConfig,
    threshold: f64,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FitOutcome> {
    tc.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(
            "training and validation splits must be non-empty".into(),
        ));
    }
    if train.num_aus() != cfg.num_aus {
        return Err(Error::Config(format!(
            "dataset has {} AUs but model.num_aus is {}",
            train.num_aus(),
            cfg.num_aus
        )));
    }
    let weights = if tc.uniform_class_weights {
        ClassWeights::uniform(cfg.num_aus)
    } else {
        compute_class_weights(&train.labels(), tc.invert_class_weights)?
    };
    let mut params = init_params(cfg, variant, &mut Rng::with_stream(tc.seed, INIT_STREAM))?;
    let mut state = OptimizerState::new(&params);
    let mut shuffle_rng = Rng::with_stream(tc.seed, SHUFFLE_STREAM);
    let mut dropout_rng = Rng::with_stream(tc.seed, DROPOUT_STREAM);
    let labels = head_labels(cfg, variant);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    let mut first_step_loss = None;
    let mut step = 0;
    let mut last_val = None;
    for epoch in 1..=tc.epochs {
        let lr = lr_at_epoch(epoch, tc);
        shuffle_rng.shuffle(&mut order);
        let mut sums = vec![0.0; labels.len()];
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            step += 1;
            let grads = {
                let mut s = Session::new(&params);
                let (inputs, targets) = batch_vars(&mut s, train, chunk)?;
                let mut mode = Mode::Train(&mut dropout_rng);
                let run = |s: &mut Session<'_>, mode: &mut Mode<'_>| -> Result<_> {
                    let logits = forward(s, cfg, variant, &inputs, mode)?;
                    let (loss, heads) = objective(s, logits, &targets, &weights, tc)?;
                    let grads = s.backward(loss)?;
                    Ok((loss, heads, grads))
                };
                let (loss, heads, grads) =
                    run(&mut s, &mut mode).map_err(|e| at_step(e, epoch, step))?;
                let value = s.graph.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss (epoch {epoch}, step {step})"
                    )));
                }
                first_step_loss.get_or_insert(value);
                total += value;
                for (acc, h) in sums.iter_mut().zip(&heads) {
                    *acc += s.graph.value(*h).item();
                }
                grads
            };
            batches += 1;
            sgd_step(&mut params, &grads, &mut state, lr, tc.sgd())
                .map_err(|e| at_step(e, epoch, step))?;
        }
        let (probs, scores) = evaluate(cfg, variant, &params, val, tc.batch_size, threshold)?;
        let entry = EpochLog {
            epoch,
            lr,
            heads: labels
                .iter()
                .cloned()
                .zip(sums.iter().map(|s| s / batches as f64))
                .collect(),
            loss: total / batches as f64,
            val_f1: scores.avg,
        };
        on_epoch(&entry);
        log.push(entry);
        last_val = Some((probs, scores));
    }
    let (val_probs, val_scores) = last_val.expect("at least one epoch");
    Ok(FitOutcome {
        params,
        log,
        class_weights: weights,
        first_step_loss: first_step_loss.unwrap_or(f64::NAN),
        steps: step,
        val_probs,
        val_scores,
    })
}
