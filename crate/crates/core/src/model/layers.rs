//! Building blocks. Each block comes as a `declare_*` function listing the
//! parameters it owns and a forward function that binds them by name.
//!
//! Forward functions accept token matrices shaped `[T, D]` or batched
//! `[B, T, D]`.

use crate::error::{Error, Result};
use crate::params::Session;
use crate::tape::{Mode, Var};

use super::config::{Activation, ModalitySpec, ModelConfig, NormPlacement};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Debug, Default)]
pub struct Decls {
    pub items: Vec<ParamDecl>,
}

impl Decls {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.items.push(ParamDecl { name, shape, init });
    }

    fn weight(&mut self, name: String, shape: Vec<usize>) {
        self.push(name, shape, Init::Normal);
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize, bias: bool) {
        self.weight(format!("{prefix}/weight"), vec![din, dout]);
        if bias {
            self.push(format!("{prefix}/bias"), vec![dout], Init::Zeros);
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}/gamma"), vec![d], Init::Ones);
        self.push(format!("{prefix}/beta"), vec![d], Init::Zeros);
    }
}

pub(crate) const CONV_BLOCKS: usize = 3;
const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

fn conv_out(n: usize) -> usize {
    (n + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1
}

/// `[H, W, C]` view of an image modality.
fn image_dims(m: &ModalitySpec) -> (usize, usize, usize) {
    match m.shape[..] {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => unreachable!("image modality with rank {}", m.shape.len()),
    }
}

fn linear(s: &mut Session<'_>, x: Var, prefix: &str, bias: bool) -> Result<Var> {
    let w = s.param(&format!("{prefix}/weight"))?;
    let y = s.graph.matmul(x, w)?;
    if bias {
        let b = s.param(&format!("{prefix}/bias"))?;
        s.graph.add(y, b)
    } else {
        Ok(y)
    }
}

fn norm(s: &mut Session<'_>, x: Var, prefix: &str, eps: f64) -> Result<Var> {
    let g = s.param(&format!("{prefix}/gamma"))?;
    let b = s.param(&format!("{prefix}/beta"))?;
    s.graph.layer_norm(x, g, b, eps)
}

fn activate(s: &mut Session<'_>, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Relu => s.graph.relu(x),
        Activation::Gelu => s.graph.gelu(x),
    }
}

pub fn backbone_prefix(modality: &str) -> String {
    format!("backbone/{modality}")
}

pub fn declare_backbone(d: &mut Decls, cfg: &ModelConfig, m: &ModalitySpec) {
    let prefix = backbone_prefix(&m.name);
    let out = cfg.num_aus * cfg.feature_dim;
    if m.is_image() {
        let (mut h, mut w, mut c) = image_dims(m);
        for i in 1..=CONV_BLOCKS {
            d.linear(
                &format!("{prefix}/conv{i}"),
                CONV_KERNEL * CONV_KERNEL * c,
                cfg.conv_channels,
                true,
            );
            h = conv_out(h);
            w = conv_out(w);
            c = cfg.conv_channels;
        }
        d.linear(&format!("{prefix}/fc"), h * w * c, out, true);
    } else {
        d.linear(
            &format!("{prefix}/fc1"),
            m.numel(),
            cfg.backbone_hidden,
            true,
        );
        d.linear(&format!("{prefix}/fc2"), cfg.backbone_hidden, out, true);
    }
}

/// Feature extractor: `[B, ...modality shape]` to `[B, T * feature_dim]`.
pub fn backbone_forward(s: &mut Session<'_>, m: &ModalitySpec, x: Var) -> Result<Var> {
    let sh = s.graph.shape(x).to_vec();
    if sh.len() != m.shape.len() + 1 || sh[1..] != m.shape[..] {
        return Err(Error::shape(
            "backbone",
            format!("modality {} expects [B, {:?}], got {sh:?}", m.name, m.shape),
        ));
    }
    let batch = sh[0];
    let prefix = backbone_prefix(&m.name);
    if m.is_image() {
        let (h, w, c) = image_dims(m);
        let mut y = s.graph.reshape(x, vec![batch, h, w, c])?;
        for i in 1..=CONV_BLOCKS {
            let patches = s.graph.im2col(y, CONV_KERNEL, CONV_STRIDE, CONV_PAD)?;
            y = linear(s, patches, &format!("{prefix}/conv{i}"), true)?;
            y = s.graph.relu(y)?;
        }
        let flat: usize = s.graph.shape(y)[1..].iter().product();
        let y = s.graph.reshape(y, vec![batch, flat])?;
        linear(s, y, &format!("{prefix}/fc"), true)
    } else {
        let h = linear(s, x, &format!("{prefix}/fc1"), true)?;
        let h = s.graph.relu(h)?;
        linear(s, h, &format!("{prefix}/fc2"), true)
    }
}

pub fn embed_prefix(modality: &str) -> String {
    format!("embed/{modality}")
}

pub fn declare_au_embed(d: &mut Decls, cfg: &ModelConfig, modality: &str) {
    let p = embed_prefix(modality);
    let (t, e) = (cfg.num_aus, cfg.embed_dim);
    d.weight(format!("{p}/weight"), vec![t, cfg.feature_dim, e]);
    d.push(format!("{p}/bias"), vec![t, e], Init::Zeros);
    d.norm(&format!("{p}/ln"), e);
}

/// Splits `[B, T * F]` features into `T` contiguous chunks, maps chunk `k`
/// with AU `k`'s own affine map, and layer-normalizes each token. No
/// positional term is added.
pub fn au_embed(s: &mut Session<'_>, cfg: &ModelConfig, modality: &str, feat: Var) -> Result<Var> {
    let sh = s.graph.shape(feat).to_vec();
    let t = cfg.num_aus;
    let len = *sh.last().unwrap();
    if !len.is_multiple_of(t) {
        return Err(Error::shape(
            "au_embed",
            format!("feature length {len} is not divisible by {t} AUs"),
        ));
    }
    let mut split = sh[..sh.len() - 1].to_vec();
    split.extend([t, len / t]);
    let chunks = s.graph.reshape(feat, split)?;
    let p = embed_prefix(modality);
    let w = s.param(&format!("{p}/weight"))?;
    let b = s.param(&format!("{p}/bias"))?;
    let y = s.graph.token_linear(chunks, w)?;
    let y = s.graph.add(y, b)?;
    norm(s, y, &format!("{p}/ln"), cfg.ln_eps)
}

/// `softmax(q kᵀ / sqrt(d_k)) v` over the token axis.
pub fn attention(s: &mut Session<'_>, q: Var, k: Var, v: Var, dk: usize) -> Result<Var> {
    let kt = s.graph.transpose_last(k)?;
    let scores = s.graph.matmul(q, kt)?;
    let scores = s.graph.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = s.graph.softmax(scores)?;
    s.graph.matmul(weights, v)
}

pub fn declare_msa(d: &mut Decls, prefix: &str, dim: usize, heads: usize, dk: usize) {
    for role in ["query", "key", "value"] {
        d.linear(&format!("{prefix}/{role}"), dim, heads * dk, false);
    }
    d.linear(&format!("{prefix}/out"), heads * dk, dim, true);
}

/// Multi-head scaled dot-product self-attention.
pub fn msa(s: &mut Session<'_>, prefix: &str, x: Var, heads: usize, dk: usize) -> Result<Var> {
    let q = linear(s, x, &format!("{prefix}/query"), false)?;
    let k = linear(s, x, &format!("{prefix}/key"), false)?;
    let v = linear(s, x, &format!("{prefix}/value"), false)?;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.graph.slice_last(q, h * dk, dk)?;
        let kh = s.graph.slice_last(k, h * dk, dk)?;
        let vh = s.graph.slice_last(v, h * dk, dk)?;
        outs.push(attention(s, qh, kh, vh, dk)?);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        s.graph.concat_last(&outs)?
    };
    linear(s, cat, &format!("{prefix}/out"), true)
}

fn declare_ffn(d: &mut Decls, prefix: &str, dim: usize, hidden: usize) {
    d.linear(&format!("{prefix}/fc1"), dim, hidden, true);
    d.linear(&format!("{prefix}/fc2"), hidden, dim, true);
}

/// affine → activation → dropout → affine.
fn ffn(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    dropout: f64,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let h = linear(s, x, &format!("{prefix}/fc1"), true)?;
    let h = activate(s, h, cfg.activation)?;
    let h = s.graph.dropout(h, dropout, mode)?;
    linear(s, h, &format!("{prefix}/fc2"), true)
}

pub fn declare_encoder_layer(d: &mut Decls, cfg: &ModelConfig, prefix: &str) {
    let e = cfg.embed_dim;
    declare_msa(
        d,
        &format!("{prefix}/msa"),
        e,
        cfg.te_heads,
        cfg.te_head_dim(),
    );
    d.norm(&format!("{prefix}/ln1"), e);
    declare_ffn(d, &format!("{prefix}/ffn"), e, cfg.mlp_dim);
    d.norm(&format!("{prefix}/ln2"), e);
}

/// Residual block around `sublayer` with the configured norm placement.
fn residual(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    norm_prefix: &str,
    x: Var,
    sublayer: impl FnOnce(&mut Session<'_>, Var) -> Result<Var>,
) -> Result<Var> {
    let y = match cfg.norm_placement {
        NormPlacement::Sublayer => {
            let y = sublayer(s, x)?;
            norm(s, y, norm_prefix, cfg.ln_eps)?
        }
        NormPlacement::Pre => {
            let n = norm(s, x, norm_prefix, cfg.ln_eps)?;
            sublayer(s, n)?
        }
    };
    s.graph.add(y, x)
}

/// One transformer encoder layer:
/// `X_A = LN(MSA(X)) + X`, `X_B = LN(FFN(X_A)) + X_A`.
pub fn encoder_layer(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let (heads, dk) = (cfg.te_heads, cfg.te_head_dim());
    let msa_prefix = format!("{prefix}/msa");
    let xa = residual(s, cfg, &format!("{prefix}/ln1"), x, |s, h| {
        msa(s, &msa_prefix, h, heads, dk)
    })?;
    let ffn_prefix = format!("{prefix}/ffn");
    residual(s, cfg, &format!("{prefix}/ln2"), xa, |s, h| {
        ffn(s, cfg, &ffn_prefix, h, cfg.dropout_rate, mode)
    })
}

pub fn stage_prefix(pipeline: &str, stage: usize) -> String {
    format!("encoder/{pipeline}/stage{stage}")
}

pub fn declare_stages(d: &mut Decls, cfg: &ModelConfig, pipeline: &str, stages: usize) {
    for st in 1..=stages {
        for l in 1..=cfg.te_layers_per_stage {
            declare_encoder_layer(d, cfg, &format!("{}/layer{l}", stage_prefix(pipeline, st)));
        }
    }
}

/// Encoder stage `stage` (1-based) of `pipeline`: `te_layers_per_stage`
/// layers applied in sequence.
pub fn encoder_stage(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    pipeline: &str,
    stage: usize,
    mut x: Var,
    mode: &mut Mode<'_>,
) -> Result<Var> {
    let p = stage_prefix(pipeline, stage);
    for l in 1..=cfg.te_layers_per_stage {
        x = encoder_layer(s, cfg, &format!("{p}/layer{l}"), x, mode)?;
    }
    Ok(x)
}

/// Parameters for fusion attention over `m` modalities: one query head per
/// modality, all projected from the first input, plus per-modality keys
/// and values.
pub fn declare_fusion_attention(d: &mut Decls, prefix: &str, dim: usize, m: usize, dk: usize) {
    for j in 1..=m {
        d.linear(&format!("{prefix}/query{j}"), dim, dk, false);
        d.linear(&format!("{prefix}/key{j}"), dim, dk, false);
        d.linear(&format!("{prefix}/value{j}"), dim, dk, false);
    }
    d.linear(&format!("{prefix}/out"), m * dk, dim, true);
}

fn check_same_shape(s: &Session<'_>, op: &'static str, xs: &[Var]) -> Result<()> {
    let first = s.graph.shape(xs[0]);
    for &x in &xs[1..] {
        if s.graph.shape(x) != first {
            return Err(Error::shape(
                op,
                format!("modalities disagree: {first:?} vs {:?}", s.graph.shape(x)),
            ));
        }
    }
    Ok(())
}

/// Two-modality fusion attention:
/// `Att(Q¹_α, K_α, V_α) ⊕ Att(Q²_α, K_β, V_β)` followed by the output
/// projection back to `D`.
pub fn fusion_attention(
    s: &mut Session<'_>,
    prefix: &str,
    x_alpha: Var,
    x_beta: Var,
    dk: usize,
) -> Result<Var> {
    check_same_shape(s, "fusion_attention", &[x_alpha, x_beta])?;
    let q1 = linear(s, x_alpha, &format!("{prefix}/query1"), false)?;
    let q2 = linear(s, x_alpha, &format!("{prefix}/query2"), false)?;
    let k_alpha = linear(s, x_alpha, &format!("{prefix}/key1"), false)?;
    let k_beta = linear(s, x_beta, &format!("{prefix}/key2"), false)?;
    let v_alpha = linear(s, x_alpha, &format!("{prefix}/value1"), false)?;
    let v_beta = linear(s, x_beta, &format!("{prefix}/value2"), false)?;
    let self_head = attention(s, q1, k_alpha, v_alpha, dk)?;
    let cross_head = attention(s, q2, k_beta, v_beta, dk)?;
    let cat = s.graph.concat_last(&[self_head, cross_head])?;
    linear(s, cat, &format!("{prefix}/out"), true)
}

/// Fusion attention over any number of modalities. Head `j` uses a query
/// projected from `xs[0]` against the keys and values of `xs[j]`.
pub fn fusion_attention_multi(
    s: &mut Session<'_>,
    prefix: &str,
    xs: &[Var],
    dk: usize,
) -> Result<Var> {
    if xs.is_empty() {
        return Err(Error::Contract(
            "fusion attention needs at least one modality".into(),
        ));
    }
    check_same_shape(s, "fusion_attention_multi", xs)?;
    let mut heads = Vec::with_capacity(xs.len());
    for (j, &x) in xs.iter().enumerate() {
        let q = linear(s, xs[0], &format!("{prefix}/query{}", j + 1), false)?;
        let k = linear(s, x, &format!("{prefix}/key{}", j + 1), false)?;
        let v = linear(s, x, &format!("{prefix}/value{}", j + 1), false)?;
        heads.push(attention(s, q, k, v, dk)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        s.graph.concat_last(&heads)?
    };
    linear(s, cat, &format!("{prefix}/out"), true)
}

pub fn fusion_prefix(module: usize) -> String {
    format!("fusion/ft{module}")
}

pub fn declare_fusion_transformer(d: &mut Decls, cfg: &ModelConfig, module: usize) {
    let e = cfg.embed_dim;
    for l in 1..=cfg.ft_layers {
        let p = format!("{}/layer{l}", fusion_prefix(module));
        declare_fusion_attention(d, &format!("{p}/attn"), e, cfg.ft_heads, cfg.ft_head_dim());
        d.norm(&format!("{p}/ln1"), e);
        declare_ffn(d, &format!("{p}/ffn"), e, cfg.mlp_dim);
        d.norm(&format!("{p}/ln2"), e);
    }
}

/// Fusion transformer module `module` (0 is the one right after the
/// embeddings). Encoder-layer structure with the self-attention replaced by
/// fusion attention, the residual taken on the α stream, and no dropout.
pub fn fusion_transformer(
    s: &mut Session<'_>,
    cfg: &ModelConfig,
    module: usize,
    x_alpha: Var,
    x_beta: Var,
) -> Result<Var> {
    if cfg.ft_heads != 2 {
        return Err(Error::Config(format!(
            "two-modality fusion needs model.ft_heads = 2, got {}",
            cfg.ft_heads
        )));
    }
    let dk = cfg.ft_head_dim();
    let mut h = x_alpha;
    for l in 1..=cfg.ft_layers {
        let p = format!("{}/layer{l}", fusion_prefix(module));
        let attn_prefix = format!("{p}/attn");
        h = residual(s, cfg, &format!("{p}/ln1"), h, |s, q| {
            fusion_attention(s, &attn_prefix, q, x_beta, dk)
        })?;
        let ffn_prefix = format!("{p}/ffn");
        h = residual(s, cfg, &format!("{p}/ln2"), h, |s, y| {
            ffn(s, cfg, &ffn_prefix, y, 0.0, &mut Mode::Eval)
        })?;
    }
    Ok(h)
}

pub fn classifier_prefix(pipeline: &str) -> String {
    format!("classifier/{pipeline}")
}

pub fn declare_classifier(d: &mut Decls, cfg: &ModelConfig, pipeline: &str) {
    let p = classifier_prefix(pipeline);
    d.weight(format!("{p}/weight"), vec![cfg.num_aus, cfg.embed_dim]);
    d.push(format!("{p}/bias"), vec![cfg.num_aus], Init::Zeros);
}

/// Per-AU logits: token `k` is scored by its own `D → 1` affine map.
pub fn classifier(s: &mut Session<'_>, pipeline: &str, x: Var) -> Result<Var> {
    let p = classifier_prefix(pipeline);
    let w = s.param(&format!("{p}/weight"))?;
    let b = s.param(&format!("{p}/bias"))?;
    let y = s.graph.mul(x, w)?;
    let y = s.graph.sum_last(y)?;
    s.graph.add(y, b)
}
