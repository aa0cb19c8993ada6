use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::keyvalue::KvDoc;

/// Name and per-sample shape of one input stream.
///
/// Rank-1 shapes are feature vectors and go through the MLP extractor.
/// Rank-2 `[H, W]` and rank-3 `[H, W, C]` shapes are images and go through
/// the strided convolution extractor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalitySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>) -> Self {
        ModalitySpec {
            name: name.into(),
            shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_image(&self) -> bool {
        self.shape.len() >= 2
    }
}

/// `8x8x3` style extent list.
pub fn format_dims(dims: &[usize]) -> String {
    dims.iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x")
}

pub fn parse_dims(text: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = text
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad extent list {text:?}")))?;
    if dims.is_empty() || dims.len() > 3 || dims.contains(&0) {
        return Err(Error::Config(format!(
            "extents must be 1-3 positive integers, got {text:?}"
        )));
    }
    Ok(dims)
}

/// Where layer norm sits relative to each sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormPlacement {
    /// `X + LN(sublayer(X))`.
    Sublayer,
    /// `X + sublayer(LN(X))`.
    Pre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

macro_rules! keyword_enum {
    ($ty:ty { $($variant:path => $kw:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $kw),+ })
            }
        }

        impl FromStr for $ty {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($kw => Ok($variant),)+
                    other => Err(format!(
                        "expected one of [{}], got {other:?}",
                        [$($kw),+].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(NormPlacement { NormPlacement::Sublayer => "sublayer", NormPlacement::Pre => "pre" });
keyword_enum!(Activation { Activation::Relu => "relu", Activation::Gelu => "gelu" });

/// Architecture hyperparameters. Defaults are the full-size model; the
/// desk-scale experiments shrink `embed_dim`, `num_stages` and friends.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Number of AU tokens `T`; equals the label count `C`.
    pub num_aus: usize,
    pub embed_dim: usize,
    pub te_heads: usize,
    pub te_layers_per_stage: usize,
    /// Per-head query/key width. `None` means `embed_dim / te_heads`.
    pub head_dim: Option<usize>,
    pub mlp_dim: usize,
    pub dropout_rate: f64,
    pub num_stages: usize,
    pub ft_heads: usize,
    pub ft_layers: usize,
    pub backbone_hidden: usize,
    /// Width of each AU's slice of the extractor output.
    pub feature_dim: usize,
    pub conv_channels: usize,
    pub norm_placement: NormPlacement,
    pub activation: Activation,
    pub init_std: f64,
    pub ln_eps: f64,
    /// Report the mean of both heads instead of the fusion head alone.
    pub average_heads: bool,
    pub modalities: Vec<ModalitySpec>,
    /// Modality names; the first supplies the fusion queries.
    pub fusion_order: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_aus: 12,
            embed_dim: 128,
            te_heads: 4,
            te_layers_per_stage: 3,
            head_dim: Some(32),
            mlp_dim: 256,
            dropout_rate: 0.5,
            num_stages: 4,
            ft_heads: 2,
            ft_layers: 1,
            backbone_hidden: 256,
            feature_dim: 32,
            conv_channels: 8,
            norm_placement: NormPlacement::Sublayer,
            activation: Activation::Relu,
            init_std: 0.02,
            ln_eps: 1e-5,
            average_heads: false,
            modalities: Vec::new(),
            fusion_order: Vec::new(),
        }
    }
}

pub fn format_modalities(mods: &[ModalitySpec]) -> String {
    mods.iter()
        .map(|m| format!("{}:{}", m.name, format_dims(&m.shape)))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn parse_modalities(text: &str) -> Result<Vec<ModalitySpec>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|item| {
            let (name, dims) = item
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("modality {item:?} is not name:dims")))?;
            let name = name.trim();
            if !valid_modality_name(name) {
                return Err(Error::Config(format!("invalid modality name {name:?}")));
            }
            Ok(ModalitySpec::new(name, parse_dims(dims)?))
        })
        .collect()
}

pub fn valid_modality_name(name: &str) -> bool {
    !name.is_empty()
        && name != "fusion"
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl ModelConfig {
    /// Query/key width per head in the self-attention stages.
    pub fn te_head_dim(&self) -> usize {
        self.head_dim
            .unwrap_or(self.embed_dim / self.te_heads.max(1))
    }

    /// Query/key width per head in the fusion modules.
    pub fn ft_head_dim(&self) -> usize {
        self.head_dim
            .unwrap_or(self.embed_dim / self.ft_heads.max(1))
    }

    pub fn modality(&self, name: &str) -> Result<&ModalitySpec> {
        self.modalities
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| Error::Config(format!("unknown modality {name}")))
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_aus", self.num_aus),
            ("embed_dim", self.embed_dim),
            ("te_heads", self.te_heads),
            ("te_layers_per_stage", self.te_layers_per_stage),
            ("mlp_dim", self.mlp_dim),
            ("ft_heads", self.ft_heads),
            ("ft_layers", self.ft_layers),
            ("backbone_hidden", self.backbone_hidden),
            ("feature_dim", self.feature_dim),
            ("conv_channels", self.conv_channels),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.embed_dim < 2 {
            return Err(Error::Config("model.embed_dim must be at least 2".into()));
        }
        match self.head_dim {
            Some(0) => return Err(Error::Config("model.head_dim must be positive".into())),
            None if !self.embed_dim.is_multiple_of(self.te_heads) || !self.embed_dim.is_multiple_of(self.ft_heads) => {
                return Err(Error::Config(format!(
                    "model.embed_dim {} is not divisible by the head counts and head_dim is unset",
                    self.embed_dim
                )))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("model.dropout_rate must be in [0, 1)".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("model.init_std must be positive".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("model.ln_eps must be positive".into()));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("duplicate modality {}", m.name)));
            }
        }
        for name in &self.fusion_order {
            self.modality(name)?;
        }
        Ok(())
    }

    /// Reads every `model.*` key present in `doc`.
    pub fn apply(&mut self, doc: &mut KvDoc) -> Result<()> {
        doc.take_into("model.num_aus", &mut self.num_aus)?;
        doc.take_into("model.embed_dim", &mut self.embed_dim)?;
        doc.take_into("model.te_heads", &mut self.te_heads)?;
        doc.take_into("model.te_layers_per_stage", &mut self.te_layers_per_stage)?;
        if let Some(v) = doc.take_raw("model.head_dim") {
            self.head_dim = match v.as_str() {
                "auto" => None,
                s => Some(
                    s.parse()
                        .map_err(|_| Error::Config(format!("bad model.head_dim {s:?}")))?,
                ),
            };
        }
        doc.take_into("model.mlp_dim", &mut self.mlp_dim)?;
        doc.take_into("model.dropout_rate", &mut self.dropout_rate)?;
        doc.take_into("model.num_stages", &mut self.num_stages)?;
        doc.take_into("model.ft_heads", &mut self.ft_heads)?;
        doc.take_into("model.ft_layers", &mut self.ft_layers)?;
        doc.take_into("model.backbone_hidden", &mut self.backbone_hidden)?;
        doc.take_into("model.feature_dim", &mut self.feature_dim)?;
        doc.take_into("model.conv_channels", &mut self.conv_channels)?;
        doc.take_into("model.norm_placement", &mut self.norm_placement)?;
        doc.take_into("model.activation", &mut self.activation)?;
        doc.take_into("model.init_std", &mut self.init_std)?;
        doc.take_into("model.ln_eps", &mut self.ln_eps)?;
        doc.take_into("model.average_heads", &mut self.average_heads)?;
        if let Some(v) = doc.take_raw("model.modalities") {
            self.modalities = parse_modalities(&v)?;
        }
        if let Some(v) = doc.take_raw("model.fusion_order") {
            self.fusion_order = v
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let head_dim = self
            .head_dim
            .map_or_else(|| "auto".to_string(), |d| d.to_string());
        [
            ("num_aus", self.num_aus.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("te_heads", self.te_heads.to_string()),
            ("te_layers_per_stage", self.te_layers_per_stage.to_string()),
            ("head_dim", head_dim),
            ("mlp_dim", self.mlp_dim.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("num_stages", self.num_stages.to_string()),
            ("ft_heads", self.ft_heads.to_string()),
            ("ft_layers", self.ft_layers.to_string()),
            ("backbone_hidden", self.backbone_hidden.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("conv_channels", self.conv_channels.to_string()),
            ("norm_placement", self.norm_placement.to_string()),
            ("activation", self.activation.to_string()),
            ("init_std", self.init_std.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
            ("average_heads", self.average_heads.to_string()),
            ("modalities", format_modalities(&self.modalities)),
            ("fusion_order", self.fusion_order.join(",")),
        ]
        .into_iter()
        .map(|(k, v)| (format!("model.{k}"), v))
        .collect()
    }
}
