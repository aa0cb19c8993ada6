use std::collections::BTreeMap;

use crate::config::GradcheckConfig;
use crate::error::Result;
use crate::gradcheck::{gradcheck, GradcheckReport};
use crate::model::{forward, init_params, ModelConfig, Variant};
use crate::params::{Gradients, ParameterStore, Session};
use crate::rng::Rng;
use crate::tape::Mode;
use crate::tensor::Tensor;

use super::fit::objective;
use super::loss::ClassWeights;
use super::TrainConfig;

/// Finite-difference check of the whole training objective of `variant`
/// on a random batch, with dropout off.
///
/// Parameters, inputs (standard normal), labels and positive weights
/// (uniform on `[1, 2)`) are all drawn from `gc.seed`.
pub fn gradcheck_model(
    model: &ModelConfig,
    variant: &Variant,
    tc: &TrainConfig,
    gc: &GradcheckConfig,
) -> Result<GradcheckReport> {
    let mut cfg = model.clone();
    cfg.init_std = gc.init_std;
    let mut rng = Rng::new(gc.seed);
    let params = init_params(&cfg, variant, &mut rng)?;
    let b = gc.batch;
    let mut inputs = BTreeMap::new();
    for m in &cfg.modalities {
        let mut shape = vec![b];
        shape.extend_from_slice(&m.shape);
        let data = (0..b * m.numel()).map(|_| rng.normal(0.0, 1.0)).collect();
        inputs.insert(m.name.clone(), Tensor::new(shape, data)?);
    }
    let c = cfg.num_aus;
    let labels = (0..b * c)
        .map(|_| f64::from(u8::from(rng.bernoulli(0.5))))
        .collect();
    let targets = Tensor::new(vec![b, c], labels)?;
    let weights = ClassWeights::new((0..c).map(|_| 1.0 + rng.uniform()).collect())?;

    let run = |p: &ParameterStore, grads: bool| -> Result<(f64, Option<Gradients>)> {
        let mut s = Session::new(p);
        let vars = inputs
            .iter()
            .map(|(k, t)| (k.clone(), s.input(t.clone())))
            .collect();
        let logits = forward(&mut s, &cfg, variant, &vars, &mut Mode::Eval)?;
        let (loss, _) = objective(&mut s, logits, &targets, &weights, tc)?;
        let value = s.graph.value(loss).item();
        let g = if grads { Some(s.backward(loss)?) } else { None };
        Ok((value, g))
    };
    let (_, analytic) = run(&params, true)?;
    let analytic = analytic.expect("requested gradients");
    gradcheck(&params, &analytic, gc.step, |p| run(p, false).map(|r| r.0))
}
