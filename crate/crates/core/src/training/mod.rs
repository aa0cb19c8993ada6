//! Losses, optimizer, learning-rate schedule and the epoch loop.

mod check;
mod fit;
mod loss;
mod optim;

pub use check::gradcheck_model;
pub use fit::{evaluate, fit, objective, predict, EpochLog, FitOutcome};
pub use loss::{combine, combined_loss, compute_class_weights, weighted_bce, ClassWeights};
pub use optim::{sgd_step, OptimizerState, SgdConfig};

use crate::error::{Error, Result};
use crate::keyvalue::KvDoc;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_start_epoch: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub seed: u64,
    pub eps_clamp: f64,
    /// Use `max P / P_k` positive weights instead of `P_k / min P`.
    pub invert_class_weights: bool,
    /// Fix every positive weight at 1.
    pub uniform_class_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            decay_start_epoch: 4,
            decay_factor: 0.1,
            epochs: 5,
            batch_size: 32,
            lambda1: 0.6,
            lambda2: 0.4,
            seed: 0,
            eps_clamp: 1e-12,
            invert_class_weights: false,
            uniform_class_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("train.lr0 must be positive");
        }
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0) {
            return bad("train.lambda1 and train.lambda2 must be positive");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return bad("train.epochs must be at least 1");
        }
        if self.decay_start_epoch == 0 {
            return bad("train.decay_start_epoch must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("train.momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("train.weight_decay must be non-negative");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("train.decay_factor must be in (0, 1]");
        }
        if !(self.eps_clamp > 0.0 && self.eps_clamp < 0.5) {
            return bad("train.eps_clamp must be in (0, 0.5)");
        }
        Ok(())
    }

    /// Reads every `train.*` key present in `doc`.
    pub fn apply(&mut self, doc: &mut KvDoc) -> Result<()> {
        doc.take_into("train.lr0", &mut self.lr0)?;
        doc.take_into("train.momentum", &mut self.momentum)?;
        doc.take_into("train.weight_decay", &mut self.weight_decay)?;
        doc.take_into("train.decay_start_epoch", &mut self.decay_start_epoch)?;
        doc.take_into("train.decay_factor", &mut self.decay_factor)?;
        doc.take_into("train.epochs", &mut self.epochs)?;
        doc.take_into("train.batch_size", &mut self.batch_size)?;
        doc.take_into("train.lambda1", &mut self.lambda1)?;
        doc.take_into("train.lambda2", &mut self.lambda2)?;
        doc.take_into("train.seed", &mut self.seed)?;
        doc.take_into("train.eps_clamp", &mut self.eps_clamp)?;
        doc.take_into("train.invert_class_weights", &mut self.invert_class_weights)?;
        doc.take_into(
            "train.uniform_class_weights",
            &mut self.uniform_class_weights,
        )?;
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("lr0", self.lr0.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("decay_start_epoch", self.decay_start_epoch.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lambda1", self.lambda1.to_string()),
            ("lambda2", self.lambda2.to_string()),
            ("seed", self.seed.to_string()),
            ("eps_clamp", self.eps_clamp.to_string()),
            (
                "invert_class_weights",
                self.invert_class_weights.to_string(),
            ),
            (
                "uniform_class_weights",
                self.uniform_class_weights.to_string(),
            ),
        ]
        .into_iter()
        .map(|(k, v)| (format!("train.{k}"), v))
        .collect()
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

/// Step schedule: `lr0` before `decay_start_epoch`, then one extra factor
/// of `decay_factor` per epoch starting at `decay_start_epoch` itself.
///
/// # Panics
///
/// If `epoch` is 0; epochs are 1-based.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    assert!(epoch >= 1, "epochs are 1-based");
    // Repeated multiplication rather than `powi`: with the defaults this
    // lands exactly on 1e-3, 1e-4, ...
    let decays = (epoch + 1).saturating_sub(cfg.decay_start_epoch);
    (0..decays).fold(cfg.lr0, |lr, _| lr * cfg.decay_factor)
}
