//! Run configuration for the command-line tools.
//!
//! One flat `key = value` file (see [`crate::keyvalue`]) holds every
//! setting. Keys and defaults:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `data.manifest` | none | manifest path, relative to the config file |
//! | `data.folds` | 3 | subject-exclusive fold count |
//! | `data.fold` | 1 | test fold of `train` and `eval` |
//! | `data.fold_seed` | 0 | fold shuffle seed |
//! | `data.standardize` | `scalar` | `off`, `scalar` or `per_element` |
//! | `run.variant` | `full` | `full`, `ft_only`, `late_fusion`, `late_fusion_te`, `single_<modality>` |
//! | `run.out` | `out` | output directory, relative to the config file |
//! | `eval.threshold` | 0.5 | decision threshold on probabilities |
//! | `eval.fold_aggregation` | `mean` | `mean` or `pooled` |
//! | `ablate.folds` | all | comma-separated 1-based folds for suites |
//! | `ablate.lambda_grid` | 8-point grid | `l1:l2` pairs, comma-separated |
//! | `gradcheck.batch` | 2 | random samples in the check batch |
//! | `gradcheck.seed` | 0 | seed for parameters, inputs and labels |
//! | `gradcheck.init_std` | 0.3 | parameter init std at the checked point |
//! | `gradcheck.step` | 1e-5 | central-difference step |
//! | `gradcheck.tolerance` | 1e-4 | maximum accepted relative error |
//!
//! `model.*` keys are those of [`ModelConfig::apply`] and `train.*` those
//! of [`TrainConfig::apply`]. When a manifest is configured, unset
//! `model.modalities` and `model.fusion_order` are taken from it.

use std::path::{Path, PathBuf};

use crate::data::{DatasetManifest, Standardize};
use crate::error::{Error, Result};
use crate::gradcheck::DEFAULT_STEP;
use crate::keyvalue::{self, KvDoc};
use crate::metrics::{FoldAggregation, Protocol, LAMBDA_GRID};
use crate::model::{ModelConfig, Variant};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub batch: usize,
    pub seed: u64,
    /// Overrides `model.init_std`. At the training init (0.02) sublayer
    /// outputs have almost no variance and the layer norms make central
    /// differences ill-conditioned, so the check runs at a larger scale.
    pub init_std: f64,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            batch: 2,
            seed: 0,
            init_std: 0.3,
            step: DEFAULT_STEP,
            tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub fold: usize,
    pub protocol: Protocol,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub variant: Variant,
    pub out: PathBuf,
    pub lambda_grid: Vec<(f64, f64)>,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: None,
            fold: 1,
            protocol: Protocol::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            variant: Variant::Full,
            out: PathBuf::from("out"),
            lambda_grid: LAMBDA_GRID.to_vec(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

fn parse_folds(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .ok()
                .filter(|&f| f >= 1)
                .ok_or_else(|| Error::Config(format!("bad fold {s:?} in ablate.folds")))
        })
        .collect()
}

fn parse_grid(text: &str) -> Result<Vec<(f64, f64)>> {
    text.split(',')
        .map(|item| {
            let bad = || Error::Config(format!("bad lambda pair {item:?}; expected l1:l2"));
            let (a, b) = item.split_once(':').ok_or_else(bad)?;
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            let b: f64 = b.trim().parse().map_err(|_| bad())?;
            if !(a > 0.0 && b > 0.0) {
                return Err(bad());
            }
            Ok((a, b))
        })
        .collect()
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Parses `text`; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut doc = KvDoc::parse(text)?;
        let mut c = RunConfig::default();
        if let Some(m) = doc.take_raw("data.manifest") {
            c.manifest = Some(resolve(base, &m));
        }
        doc.take_into("data.folds", &mut c.protocol.folds)?;
        doc.take_into("data.fold", &mut c.fold)?;
        doc.take_into("data.fold_seed", &mut c.protocol.fold_seed)?;
        doc.take_into::<Standardize>("data.standardize", &mut c.protocol.standardize)?;
        doc.take_into("eval.threshold", &mut c.protocol.threshold)?;
        doc.take_into::<FoldAggregation>("eval.fold_aggregation", &mut c.protocol.aggregation)?;
        if let Some(v) = doc.take_raw("ablate.folds") {
            c.protocol.only_folds = Some(parse_folds(&v)?);
        }
        if let Some(v) = doc.take_raw("ablate.lambda_grid") {
            c.lambda_grid = parse_grid(&v)?;
        }
        doc.take_into("run.variant", &mut c.variant)?;
        if let Some(o) = doc.take_raw("run.out") {
            c.out = resolve(base, &o);
        } else {
            c.out = base.join("out");
        }
        doc.take_into("gradcheck.batch", &mut c.gradcheck.batch)?;
        doc.take_into("gradcheck.seed", &mut c.gradcheck.seed)?;
        doc.take_into("gradcheck.init_std", &mut c.gradcheck.init_std)?;
        doc.take_into("gradcheck.step", &mut c.gradcheck.step)?;
        doc.take_into("gradcheck.tolerance", &mut c.gradcheck.tolerance)?;
        c.model.apply(&mut doc)?;
        c.train.apply(&mut doc)?;
        doc.finish()?;
        c.validate_own()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    fn validate_own(&self) -> Result<()> {
        let p = &self.protocol;
        if p.folds < 2 {
            return Err(Error::Config("data.folds must be at least 2".into()));
        }
        if !(1..=p.folds).contains(&self.fold) {
            return Err(Error::Config(format!(
                "data.fold must be in 1..={}",
                p.folds
            )));
        }
        if let Some(f) = p
            .only_folds
            .as_ref()
            .and_then(|v| v.iter().find(|&&f| f > p.folds))
        {
            return Err(Error::Config(format!(
                "ablate.folds entry {f} exceeds data.folds"
            )));
        }
        if !(p.threshold > 0.0 && p.threshold < 1.0) {
            return Err(Error::Config("eval.threshold must be in (0, 1)".into()));
        }
        let g = &self.gradcheck;
        if g.batch == 0 || !(g.step > 0.0) || !(g.tolerance > 0.0) || !(g.init_std > 0.0) {
            return Err(Error::Config("gradcheck settings must be positive".into()));
        }
        self.train.validate()
    }

    /// Fills modality settings from `manifest` and checks they agree.
    pub fn bind_manifest(&mut self, manifest: &DatasetManifest) -> Result<()> {
        if self.model.num_aus != manifest.num_aus {
            return Err(Error::Config(format!(
                "model.num_aus is {} but the manifest declares C={}",
                self.model.num_aus, manifest.num_aus
            )));
        }
        if self.model.modalities.is_empty() {
            self.model.modalities = manifest.modalities.clone();
        } else if self.model.modalities != manifest.modalities {
            return Err(Error::Config(
                "model.modalities disagrees with the manifest".into(),
            ));
        }
        if self.model.fusion_order.is_empty() {
            self.model.fusion_order = manifest.modalities.iter().map(|m| m.name.clone()).collect();
        }
        self.validate_model()
    }

    /// Model validation plus the variant's modality requirements.
    pub fn validate_model(&self) -> Result<()> {
        self.model.validate()?;
        match &self.variant {
            Variant::Single(m) => self.model.modality(m).map(|_| ()),
            _ if self.model.fusion_order.len() != 2 => Err(Error::Config(format!(
                "variant {} needs two modalities in model.fusion_order",
                self.variant
            ))),
            _ => Ok(()),
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = &self.protocol;
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        if let Some(m) = &self.manifest {
            put("data.manifest", m.display().to_string());
        }
        put("data.folds", p.folds.to_string());
        put("data.fold", self.fold.to_string());
        put("data.fold_seed", p.fold_seed.to_string());
        put("data.standardize", p.standardize.to_string());
        put("run.variant", self.variant.label());
        put("run.out", self.out.display().to_string());
        put("eval.threshold", p.threshold.to_string());
        put("eval.fold_aggregation", p.aggregation.to_string());
        if let Some(f) = &p.only_folds {
            put(
                "ablate.folds",
                f.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            );
        }
        put(
            "ablate.lambda_grid",
            self.lambda_grid
                .iter()
                .map(|(a, b)| format!("{a}:{b}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        let g = &self.gradcheck;
        put("gradcheck.batch", g.batch.to_string());
        put("gradcheck.seed", g.seed.to_string());
        put("gradcheck.init_std", g.init_std.to_string());
        put("gradcheck.step", g.step.to_string());
        put("gradcheck.tolerance", g.tolerance.to_string());
        out.extend(self.model.to_pairs());
        out.extend(self.train.to_pairs());
        out
    }

    /// The resolved configuration in the input grammar.
    pub fn render(&self) -> String {
        keyvalue::render(&self.to_pairs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_paths() {
        let c = RunConfig::parse("data.manifest = d/manifest.txt\n", Path::new("/cfg")).unwrap();
        assert_eq!(
            c.manifest.as_deref(),
            Some(Path::new("/cfg/d/manifest.txt"))
        );
        assert_eq!(c.out, Path::new("/cfg/out"));
        assert_eq!(c.lambda_grid.len(), 8);
        assert_eq!(c.variant, Variant::Full);
    }

    #[test]
    fn unknown_keys_rejected_with_line() {
        let err = RunConfig::parse("train.lr0 = 0.1\n\ntrain.lr = 0.1\n", Path::new("."))
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 3") && err.contains("train.lr"), "{err}");
    }

    #[test]
    fn resolved_echo_round_trips() {
        let text = "run.variant = single_beta\nmodel.modalities = alpha:4,beta:3x3\nmodel.fusion_order = beta,alpha\n\
                    ablate.folds = 1,3\nablate.lambda_grid = 0.6:0.4,1:0.5\ntrain.seed = 3\ngradcheck.init_std = 0.4\n";
        let c = RunConfig::parse(text, Path::new("/x")).unwrap();
        let back = RunConfig::parse(&c.render(), Path::new("/elsewhere")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_settings() {
        for bad in [
            "data.folds = 1",
            "data.fold = 4",
            "eval.threshold = 1.5",
            "ablate.lambda_grid = 0.5",
            "ablate.folds = 0",
        ] {
            assert!(RunConfig::parse(bad, Path::new(".")).is_err(), "{bad}");
        }
    }
}
