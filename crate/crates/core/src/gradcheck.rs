//! Central finite-difference gradient oracle.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{Gradients, ParameterStore};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Worst relative error per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub per_param: BTreeMap<String, ParamCheck>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .values()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, &ParamCheck)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Compares `analytic` against `(f(θ+h) - f(θ-h)) / 2h` for every entry of
/// every parameter in `params`. `f` must be deterministic (no dropout).
pub fn gradcheck<F>(
    params: &ParameterStore,
    analytic: &Gradients,
    h: f64,
    mut f: F,
) -> Result<GradcheckReport>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let mut probe = params.clone();
    let mut report = GradcheckReport::default();
    for (name, value) in params.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no analytic gradient for {name}")))?;
        if grad.shape() != value.shape() {
            return Err(Error::shape(
                "gradcheck",
                format!(
                    "{name}: gradient {:?} vs value {:?}",
                    grad.shape(),
                    value.shape()
                ),
            ));
        }
        let mut check = ParamCheck {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..value.numel() {
            let orig = value.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = f(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_err || i == 0 {
                check = ParamCheck {
                    max_rel_err: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.per_param.insert(name.to_string(), check);
    }
    Ok(report)
}
