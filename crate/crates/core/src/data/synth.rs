//! Two-modality synthetic data with planted cross-modal synergy.
//!
//! AU `k` is α-driven when `k % 3 == 0`, β-driven when `k % 3 == 1` and a
//! synergy AU otherwise. Each sample draws hidden bits `a, b ∈ {0,1}^C`;
//! labels are `a_k`, `b_k` and `a_k XOR b_k` respectively. The α features
//! are `W_α a + o_α(subject) + σ ε` with a fixed `±1` codebook `W_α`, and
//! likewise for β.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::keyvalue::KvDoc;
use crate::model::{format_modalities, parse_modalities, ModalitySpec};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::dataset::{Dataset, Sample};
use super::manifest::{write_dataset, DatasetManifest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AuRole {
    AlphaDriven,
    BetaDriven,
    Synergy,
}

pub fn au_role(k: usize) -> AuRole {
    match k % 3 {
        0 => AuRole::AlphaDriven,
        1 => AuRole::BetaDriven,
        _ => AuRole::Synergy,
    }
}

/// 0-based indices of AUs with `role` among `num_aus`.
pub fn aus_with_role(num_aus: usize, role: AuRole) -> Vec<usize> {
    (0..num_aus).filter(|&k| au_role(k) == role).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_aus: usize,
    pub subjects: usize,
    pub samples_per_subject: usize,
    /// σ of the per-sample feature noise.
    pub sigma: f64,
    /// Std of the per-subject, per-feature offset.
    pub subject_offset_std: f64,
    /// Exactly two modalities: α then β.
    pub modalities: Vec<ModalitySpec>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_aus: 12,
            subjects: 20,
            samples_per_subject: 100,
            sigma: 0.1,
            subject_offset_std: 0.1,
            modalities: vec![
                ModalitySpec::new("alpha", vec![24]),
                ModalitySpec::new("beta", vec![24]),
            ],
        }
    }
}

impl SynthSpec {
    /// `synth.*` keys; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let mut spec = SynthSpec::default();
        doc.take_into("synth.num_aus", &mut spec.num_aus)?;
        doc.take_into("synth.subjects", &mut spec.subjects)?;
        doc.take_into("synth.samples_per_subject", &mut spec.samples_per_subject)?;
        doc.take_into("synth.sigma", &mut spec.sigma)?;
        doc.take_into("synth.subject_offset_std", &mut spec.subject_offset_std)?;
        if let Some(v) = doc.take_raw("synth.modalities") {
            spec.modalities = parse_modalities(&v)?;
        }
        doc.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn render(&self) -> String {
        crate::keyvalue::render(
            &[
                ("num_aus", self.num_aus.to_string()),
                ("subjects", self.subjects.to_string()),
                ("samples_per_subject", self.samples_per_subject.to_string()),
                ("sigma", self.sigma.to_string()),
                ("subject_offset_std", self.subject_offset_std.to_string()),
                ("modalities", format_modalities(&self.modalities)),
            ]
            .map(|(k, v)| (format!("synth.{k}"), v)),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_aus == 0 || self.subjects == 0 || self.samples_per_subject == 0 {
            return Err(Error::Config("synth counts must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite())
            || !(self.subject_offset_std >= 0.0 && self.subject_offset_std.is_finite())
        {
            return Err(Error::Config(
                "synth noise scales must be non-negative".into(),
            ));
        }
        match &self.modalities[..] {
            [a, b] if a.name != b.name => Ok(()),
            _ => Err(Error::Config(
                "synth.modalities must name exactly two distinct modalities".into(),
            )),
        }
    }
}

fn codebook(rng: &mut Rng, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.sign()).collect()
}

fn features(w: &[f64], bits: &[u8], offset: &[f64], sigma: f64, rng: &mut Rng) -> Vec<f64> {
    let c = bits.len();
    offset
        .iter()
        .enumerate()
        .map(|(r, &o)| {
            let signal: f64 = w[r * c..(r + 1) * c]
                .iter()
                .zip(bits)
                .map(|(&wr, &b)| wr * f64::from(b))
                .sum();
            signal + o + sigma * rng.normal(0.0, 1.0)
        })
        .collect()
}

/// Deterministic in `(spec, seed)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let c = spec.num_aus;
    let (ma, mb) = (&spec.modalities[0], &spec.modalities[1]);
    let (fa, fb) = (ma.numel(), mb.numel());
    let mut rng = Rng::new(seed);
    let wa = codebook(&mut rng, fa, c);
    let wb = codebook(&mut rng, fb, c);

    let mut samples = Vec::with_capacity(spec.subjects * spec.samples_per_subject);
    for subj in 0..spec.subjects {
        let subject = format!("s{:03}", subj + 1);
        let oa: Vec<f64> = (0..fa)
            .map(|_| rng.normal(0.0, spec.subject_offset_std))
            .collect();
        let ob: Vec<f64> = (0..fb)
            .map(|_| rng.normal(0.0, spec.subject_offset_std))
            .collect();
        for n in 0..spec.samples_per_subject {
            let a: Vec<u8> = (0..c).map(|_| u8::from(rng.bernoulli(0.5))).collect();
            let b: Vec<u8> = (0..c).map(|_| u8::from(rng.bernoulli(0.5))).collect();
            let labels = (0..c)
                .map(|k| match au_role(k) {
                    AuRole::AlphaDriven => a[k],
                    AuRole::BetaDriven => b[k],
                    AuRole::Synergy => a[k] ^ b[k],
                })
                .collect();
            let xa = features(&wa, &a, &oa, spec.sigma, &mut rng);
            let xb = features(&wb, &b, &ob, spec.sigma, &mut rng);
            let modalities: BTreeMap<String, Tensor> = [
                (ma.name.clone(), Tensor::new(ma.shape.clone(), xa)?),
                (mb.name.clone(), Tensor::new(mb.shape.clone(), xb)?),
            ]
            .into_iter()
            .collect();
            samples.push(Sample {
                id: format!("{subject}_{n:04}"),
                subject: subject.clone(),
                modalities,
                labels,
            });
        }
    }
    Dataset::new(spec.modalities.clone(), c, samples)
}

/// Generates and writes the dataset under `dir`.
pub fn synth_to_dir(spec: &SynthSpec, seed: u64, dir: &Path) -> Result<DatasetManifest> {
    let ds = synth_generate(spec, seed)?;
    write_dataset(dir, &ds)
}
