use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{is_decayed, Gradients, ParameterStore};
use crate::tensor::Tensor;

/// SGD momentum buffers, one per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParameterStore) -> Self {
        OptimizerState {
            velocity: params
                .iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor> {
        self.velocity.get(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← μ v + g + λ θ`, `θ ← θ − lr v`. The decay term is skipped for
/// biases and layer-norm parameters.
pub fn sgd_step(
    params: &mut ParameterStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    cfg: SgdConfig,
) -> Result<()> {
    for (name, theta) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?;
        let v = state
            .velocity
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no momentum buffer for parameter {name}")))?;
        if g.shape() != theta.shape() || v.shape() != theta.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("{name}: param {:?}, grad {:?}", theta.shape(), g.shape()),
            ));
        }
        let wd = if is_decayed(name) {
            cfg.weight_decay
        } else {
            0.0
        };
        for ((t, v), &g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = cfg.momentum * *v + g + wd * *t;
            *t -= lr * *v;
        }
    }
    Ok(())
}
