//! Whole-model wiring for every evaluated variant.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::params::{ParameterStore, Session};
use crate::rng::Rng;
use crate::tape::{Mode, Var};
use crate::tensor::Tensor;

use super::config::ModelConfig;
use super::layers::{self, Decls, Init};

/// Name of the fused pipeline in parameter paths.
pub const FUSION_PIPELINE: &str = "fusion";

/// Model variants covered by the experiment harness.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Dual pipeline with fusion transformers before and after every stage.
    Full,
    /// Fusion transformer after the embeddings, no encoder stages.
    FtOnly,
    /// One pipeline on the named modality, no fusion.
    Single(String),
    /// Two independent single-modality models without encoder stages,
    /// probabilities averaged.
    LateFusion,
    /// Late fusion with encoder stages in each branch.
    LateFusionTe,
}

impl Variant {
    pub fn label(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::FtOnly => "ft_only".into(),
            Variant::Single(m) => format!("single_{m}"),
            Variant::LateFusion => "late_fusion".into(),
            Variant::LateFusionTe => "late_fusion_te".into(),
        }
    }

    /// Whether the variant is trained with the two-head combined loss.
    pub fn is_dual(&self) -> bool {
        matches!(self, Variant::Full | Variant::FtOnly)
    }

    /// Modality order or modality this variant reads, as shown in reports.
    pub fn order_label(&self, cfg: &ModelConfig) -> String {
        match self {
            Variant::Single(m) => m.clone(),
            Variant::Full | Variant::FtOnly => format!("F({})", cfg.fusion_order.join(",")),
            Variant::LateFusion | Variant::LateFusionTe => cfg.fusion_order.join("+"),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "full" => Variant::Full,
            "ft_only" => Variant::FtOnly,
            "late_fusion" => Variant::LateFusion,
            "late_fusion_te" => Variant::LateFusionTe,
            other => match other.strip_prefix("single_") {
                Some(m) if !m.is_empty() => Variant::Single(m.to_string()),
                _ => {
                    return Err(format!(
                        "expected full, ft_only, late_fusion, late_fusion_te or single_<modality>, got {other:?}"
                    ))
                }
            },
        })
    }
}

/// Logits of one forward pass, each `[B, T]` (or `[T]` unbatched).
#[derive(Clone, Copy, Debug)]
pub enum Logits {
    /// A single prediction head.
    Single(Var),
    /// Fusion pipeline head and β pipeline head.
    Dual { fusion: Var, beta: Var },
    /// Two independent branches in `fusion_order` order.
    Late { first: Var, second: Var },
}

fn two_modalities(cfg: &ModelConfig) -> Result<(&str, &str)> {
    match &cfg.fusion_order[..] {
        [a, b] => Ok((a, b)),
        other => Err(Error::Config(format!(
            "fusion variants need exactly two modalities in model.fusion_order, got {other:?}"
        ))),
    }
}

fn stage_count(cfg: &ModelConfig, variant: &Variant) -> usize {
    match variant {
        Variant::FtOnly | Variant::LateFusion => 0,
        _ => cfg.num_stages,
    }
}

fn declare_pipeline(d: &mut Decls, cfg: &ModelConfig, modality: &str, stages: usize) -> Result<()> {
    let m = cfg.modality(modality)?;
    layers::declare_backbone(d, cfg, m);
    layers::declare_au_embed(d, cfg, modality);
    layers::declare_stages(d, cfg, modality, stages);
    layers::declare_classifier(d, cfg, modality);
    Ok(())
}

/// Every parameter `variant` owns, in initialization order.
pub fn declare(cfg: &ModelConfig, variant: &Variant) -> Result<Decls> {
    cfg.validate()?;
    let mut d = Decls::default();
    let stages = stage_count(cfg, variant);
    match variant {
        Variant::Single(m) => declare_pipeline(&mut d, cfg, m, stages)?,
        Variant::LateFusion | Variant::LateFusionTe => {
            let (a, b) = two_modalities(cfg)?;
            declare_pipeline(&mut d, cfg, a, stages)?;
            declare_pipeline(&mut d, cfg, b, stages)?;
        }
        Variant::Full | Variant::FtOnly => {
            let (a, b) = two_modalities(cfg)?;
            for m in [a, b] {
                let spec = cfg.modality(m)?;
                layers::declare_backbone(&mut d, cfg, spec);
                layers::declare_au_embed(&mut d, cfg, m);
            }
            layers::declare_fusion_transformer(&mut d, cfg, 0);
            layers::declare_stages(&mut d, cfg, FUSION_PIPELINE, stages);
            layers::declare_stages(&mut d, cfg, b, stages);
            for s in 1..=stages {
                layers::declare_fusion_transformer(&mut d, cfg, s);
            }
            layers::declare_classifier(&mut d, cfg, FUSION_PIPELINE);
            layers::declare_classifier(&mut d, cfg, b);
        }
    }
    Ok(d)
}

/// Fresh parameters: affine weights ~ N(0, init_std²), biases and LN
/// shifts 0, LN scales 1.
pub fn init_params(cfg: &ModelConfig, variant: &Variant, rng: &mut Rng) -> Result<ParameterStore> {
    let decls = declare(cfg, variant)?;
    let mut store = ParameterStore::new();
    for p in decls.items {
        let numel: usize = p.shape.iter().product();
        let data = match p.init {
            Init::Normal => (0..numel).map(|_| rng.normal(0.0, cfg.init_std)).collect(),
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
        };
        store.insert(p.name, Tensor::new(p.shape, data)?)?;
    }
    Ok(store)
}

/// Batched raw inputs keyed by modality name, each `[B, ...shape]`.
pub type Inputs = BTreeMap<String, Var>;

fn input(inputs: &Inputs, modality: &str) -> Result<Var> {
    inputs
        .get(modality)
        .copied()
        .ok_or_else(|| Error::Contract(format!("no input for modality {modality}")))
}

/// Backbone followed by the AU embedding: raw input to `[B, T, D]` tokens.
pub fn embed(s: &mut Session<'_>, cfg: &ModelConfig, modality: &str, raw: Var) -> Result<Var> {
    let spec = cfg.modality(modality)?;
    let feat = layers::backbone_forward(s, spec, raw)?;
    layers::au_embed(s, cfg, modality, feat)
}

/// Backbone → AU embedding → encoder stages → classifier, with no fusion.
pub fn single_modality_forward(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    modality: &str,
    stages: usize,
    raw: Var,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let mut h = embed(s, cfg, modality, raw)?;
    for st in 1..=stages {
        h = layers::encoder_stage(s, cfg, modality, st, h, mode)?;
    }
    layers::classifier(s, modality, h)
}

/// Dual-pipeline forward.
///
/// `h₁ = FT₀(e_α, e_β)`, `h₂ = e_β`; each stage applies its encoder to
/// both pipelines and then `h₁ ← FT_s(h₁, h₂)`. Returns the fusion head
/// and β head logits.
pub fn mft_forward(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    stages: usize,
    raw_alpha: Var,
    raw_beta: Var,
    mode: &mut Mode<'_>,
) -> Result<(Var, Var)> {
    let (a, b) = two_modalities(cfg)?;
    let e_alpha = embed(s, cfg, a, raw_alpha)?;
    let e_beta = embed(s, cfg, b, raw_beta)?;
    let mut h1 = layers::fusion_transformer(s, cfg, 0, e_alpha, e_beta)?;
    let mut h2 = e_beta;
    for st in 1..=stages {
        h1 = layers::encoder_stage(s, cfg, FUSION_PIPELINE, st, h1, mode)?;
        h2 = layers::encoder_stage(s, cfg, b, st, h2, mode)?;
        h1 = layers::fusion_transformer(s, cfg, st, h1, h2)?;
    }
    let fusion = layers::classifier(s, FUSION_PIPELINE, h1)?;
    let beta = layers::classifier(s, b, h2)?;
    Ok((fusion, beta))
}

/// Forward pass of any variant.
pub fn forward(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    variant: &Variant,
    inputs: &Inputs,
    mode: &mut Mode<'_>,
) -> Result<Logits> {
    let stages = stage_count(cfg, variant);
    match variant {
        Variant::Single(m) => {
            let x = input(inputs, m)?;
            Ok(Logits::Single(single_modality_forward(
                s, cfg, m, stages, x, mode,
            )?))
        }
        Variant::LateFusion | Variant::LateFusionTe => {
            let (a, b) = two_modalities(cfg)?;
            let (xa, xb) = (input(inputs, a)?, input(inputs, b)?);
            let first = single_modality_forward(s, cfg, a, stages, xa, mode)?;
            let second = single_modality_forward(s, cfg, b, stages, xb, mode)?;
            Ok(Logits::Late { first, second })
        }
        Variant::Full | Variant::FtOnly => {
            let (a, b) = two_modalities(cfg)?;
            let (xa, xb) = (input(inputs, a)?, input(inputs, b)?);
            let (fusion, beta) = mft_forward(s, cfg, stages, xa, xb, mode)?;
            Ok(Logits::Dual { fusion, beta })
        }
    }
}

/// Reported per-AU probabilities for `logits`.
///
/// Dual models report the fusion head unless `average_heads` is set; late
/// fusion averages its two branches.
pub fn probabilities(s: &mut Session<'_>, cfg: &ModelConfig, logits: Logits) -> Result<Var> {
    let mean = |s: &mut Session<'_>, x: Var, y: Var| -> Result<Var> {
        let px = s.graph.sigmoid(x)?;
        let py = s.graph.sigmoid(y)?;
        let sum = s.graph.add(px, py)?;
        s.graph.scale(sum, 0.5)
    };
    match logits {
        Logits::Single(x) => s.graph.sigmoid(x),
        Logits::Dual { fusion, beta } if cfg.average_heads => mean(s, fusion, beta),
        Logits::Dual { fusion, .. } => s.graph.sigmoid(fusion),
        Logits::Late { first, second } => mean(s, first, second),
    }
}
