//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly, records its inputs, and returns a [`Var`] handle. Because inputs
//! always exist before the node that consumes them, the node list is already
//! topologically sorted and [`Graph::backward`] is a single reverse sweep.
//!
//! Graphs are built fresh for every forward pass and never shared between
//! threads.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Whether stochastic layers are active. Training mode carries the stream
/// dropout masks are drawn from.
pub enum Mode<'r> {
    Train(&'r mut Rng),
    Eval,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub(crate) const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    TransposeLast {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleShift {
        x: Var,
        scale: f64,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Log {
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Slice {
        x: Var,
        start: usize,
        width: usize,
    },
    Reshape {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SumLast {
        x: Var,
        n: usize,
    },
    SumAll {
        x: Var,
    },
    TokenLinear {
        x: Var,
        w: Var,
        tokens: usize,
        din: usize,
        dout: usize,
    },
    Im2Col {
        x: Var,
        geom: ConvGeometry,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Geometry of a channel-last 2-D patch extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

// c[m×n] += a[m×k] · b[k×n]
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[m×k] += a[m×n] · b[k×n]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, rg))
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., M, K]`. `b` is either `[K, N]`, shared by every leading
    /// index of `a`, or `[..., K, N]` with the same leading extents as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let mismatch = || Error::shape("matmul", format!("cannot multiply {ash:?} by {bsh:?}"));
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let lead = &ash[..ash.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = bsh.len() == 2;
        if !shared_rhs && (bsh.len() != ash.len() || &bsh[..bsh.len() - 2] != lead) {
            return Err(mismatch());
        }
        if bsh[bsh.len() - 2] != k {
            return Err(mismatch());
        }
        let n = bsh[bsh.len() - 1];
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_rhs {
                gemm(av, bv, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    gemm(
                        &av[i * m * k..(i + 1) * m * k],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let op = Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        };
        self.emit("matmul", Tensor::from_parts(shape, out), op, &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() < 2 {
            return Err(Error::shape(
                "transpose",
                format!("need rank >= 2, got {sh:?}"),
            ));
        }
        let (rows, cols) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let batch = sh[..sh.len() - 2].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let base = b * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    out[base + c * rows + r] = src[base + r * cols + c];
                }
            }
        }
        let mut shape = sh.clone();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        let op = Op::TransposeLast {
            x,
            batch,
            rows,
            cols,
        };
        self.emit("transpose", Tensor::from_parts(shape, out), op, &[x])
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let ash = self.shape(a);
        let bsh = self.shape(b);
        if ash.ends_with(bsh) {
            Ok(())
        } else {
            Err(Error::shape(
                op,
                format!("{bsh:?} does not broadcast against {ash:?}"),
            ))
        }
    }

    /// Elementwise `a + b`; `b`'s shape must be a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let bn = bv.len();
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % bn])
            .collect();
        let shape = av.shape().to_vec();
        self.emit(
            "add",
            Tensor::from_parts(shape, out),
            Op::Add { a, b },
            &[a, b],
        )
    }

    /// Elementwise `a * b`; `b`'s shape must be a suffix of `a`'s.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_check("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let bn = bv.len();
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i % bn])
            .collect();
        let shape = av.shape().to_vec();
        self.emit(
            "mul",
            Tensor::from_parts(shape, out),
            Op::Mul { a, b },
            &[a, b],
        )
    }

    /// `scale * x + shift`.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|x| scale * x + shift).collect();
        let shape = v.shape().to_vec();
        self.emit(
            "scale",
            Tensor::from_parts(shape, out),
            Op::ScaleShift { x, scale },
            &[x],
        )
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.scale_shift(x, scale, 0.0)
    }

    fn unary(&mut self, name: &str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(x);
        let out = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        self.emit(name, Tensor::from_parts(shape, out), op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu { x })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, |v| gelu_parts(v).0, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid { x })
    }

    /// Natural log with its argument clamped below at `1e-12`.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, |v| v.max(LOG_FLOOR).ln(), Op::Log { x })
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        check_finite("softmax input", v.data())?;
        let n = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let shape = v.shape().to_vec();
        self.emit(
            "softmax",
            Tensor::from_parts(shape, out),
            Op::Softmax { x },
            &[x],
        )
    }

    /// Layer normalization over the last axis followed by the affine map
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if d < 2 {
            return Err(Error::shape(
                "layer_norm",
                format!("last axis must be >= 2, got {xs:?}"),
            ));
        }
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(p) != [d] {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} has shape {:?}, input {xs:?}", self.shape(p)),
                ));
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.emit(
            "layer_norm",
            Tensor::from_parts(xs, out),
            op,
            &[x, gamma, beta],
        )
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != lead.len() + 1 || sh[..lead.len()] != lead[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{sh:?} does not match leading extents {lead:?}"),
                ));
            }
            widths.push(*sh.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let op = Op::Concat {
            parts: parts.iter().copied().zip(widths).collect(),
        };
        self.emit("concat", Tensor::from_parts(shape, out), op, parts)
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let n = *sh.last().unwrap();
        if width == 0 || start + width > n {
            return Err(Error::shape(
                "slice",
                format!(
                    "range {start}..{} outside last axis of {sh:?}",
                    start + width
                ),
            ));
        }
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + width].iter().copied())
            .collect();
        let mut shape = sh;
        *shape.last_mut().unwrap() = width;
        self.emit(
            "slice",
            Tensor::from_parts(shape, out),
            Op::Slice { x, start, width },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        self.emit("reshape", v, Op::Reshape { x }, &[x])
    }

    /// Inverted dropout. The identity in eval mode or at `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        let rng = match mode {
            Mode::Train(rng) if rate > 0.0 => rng,
            _ => return Ok(x),
        };
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let out = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = v.shape().to_vec();
        self.emit(
            "dropout",
            Tensor::from_parts(shape, out),
            Op::Dropout { x, mask },
            &[x],
        )
    }

    /// Sum over the last axis. A rank-1 input reduces to shape `[1]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let n = *sh.last().unwrap();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum())
            .collect();
        let shape = if sh.len() == 1 {
            vec![1]
        } else {
            sh[..sh.len() - 1].to_vec()
        };
        self.emit(
            "sum",
            Tensor::from_parts(shape, out),
            Op::SumLast { x, n },
            &[x],
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        self.emit("sum", Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    /// Applies a distinct affine map to every token: `x` is `[..., T, Din]`,
    /// `w` is `[T, Din, Dout]`, and token `t` is multiplied by `w[t]`.
    pub fn token_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bad = || Error::shape("token_linear", format!("cannot apply {ws:?} to {xs:?}"));
        if xs.len() < 2 || ws.len() != 3 {
            return Err(bad());
        }
        let (tokens, din, dout) = (ws[0], ws[1], ws[2]);
        if xs[xs.len() - 2] != tokens || xs[xs.len() - 1] != din {
            return Err(bad());
        }
        let batch: usize = xs[..xs.len() - 2].iter().product();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; batch * tokens * dout];
        for b in 0..batch {
            for t in 0..tokens {
                let xi = (b * tokens + t) * din;
                let oi = (b * tokens + t) * dout;
                gemm(
                    &xv[xi..xi + din],
                    &wv[t * din * dout..(t + 1) * din * dout],
                    &mut out[oi..oi + dout],
                    1,
                    din,
                    dout,
                );
            }
        }
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.push(dout);
        let op = Op::TokenLinear {
            x,
            w,
            tokens,
            din,
            dout,
        };
        self.emit("token_linear", Tensor::from_parts(shape, out), op, &[x, w])
    }

    /// Extracts `kernel × kernel` patches from a channel-last `[B, H, W, C]`
    /// input, giving `[B, Ho, Wo, kernel * kernel * C]` with zero padding.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 4 || kernel == 0 || stride == 0 {
            return Err(Error::shape(
                "im2col",
                format!("need [B, H, W, C], got {sh:?}"),
            ));
        }
        if sh[1] + 2 * padding < kernel || sh[2] + 2 * padding < kernel {
            return Err(Error::shape(
                "im2col",
                format!("kernel {kernel} larger than {sh:?}"),
            ));
        }
        let geom = ConvGeometry {
            batch: sh[0],
            height: sh[1],
            width: sh[2],
            channels: sh[3],
            kernel,
            stride,
            padding,
        };
        let (ho, wo, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let src = self.value(x).data();
        let mut out = vec![0.0; geom.batch * ho * wo * pl];
        im2col_walk(&geom, |dst, s| out[dst] = src[s]);
        let op = Op::Im2Col { x, geom };
        self.emit(
            "im2col",
            Tensor::from_parts(vec![geom.batch, ho, wo, pl], out),
            op,
            &[x],
        )
    }

    /// Populates gradients of every reachable leaf. Calling again without
    /// [`Graph::zero_grad`] accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            check_finite("backward", &g)?;
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let rg = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |da| {
                    if shared_rhs {
                        gemm_nt(g, bv, da, batch * m, n, k);
                    } else {
                        for t in 0..batch {
                            gemm_nt(
                                &g[t * m * n..(t + 1) * m * n],
                                &bv[t * k * n..(t + 1) * k * n],
                                &mut da[t * m * k..(t + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                });
                acc(b, &mut |db| {
                    if shared_rhs {
                        gemm_tn(av, g, db, batch * m, k, n);
                    } else {
                        for t in 0..batch {
                            gemm_tn(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * n..(t + 1) * m * n],
                                &mut db[t * k * n..(t + 1) * k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                });
            }
            &Op::TransposeLast {
                x,
                batch,
                rows,
                cols,
            } => acc(x, &mut |dx| {
                for b in 0..batch {
                    let base = b * rows * cols;
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[base + r * cols + c] += g[base + c * rows + r];
                        }
                    }
                }
            }),
            &Op::Add { a, b } => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                acc(b, &mut |db| {
                    let bn = db.len();
                    for (j, gv) in g.iter().enumerate() {
                        db[j % bn] += gv;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                let bn = bv.len();
                acc(a, &mut |da| {
                    for (j, gv) in g.iter().enumerate() {
                        da[j] += gv * bv[j % bn];
                    }
                });
                acc(b, &mut |db| {
                    for (j, gv) in g.iter().enumerate() {
                        db[j % bn] += gv * av[j];
                    }
                });
            }
            &Op::ScaleShift { x, scale } => acc(x, &mut |dx| {
                dx.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g)
            }),
            &Op::Relu { x } => {
                let xv = val(x);
                acc(x, &mut |dx| {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            dx[j] += g[j];
                        }
                    }
                })
            }
            &Op::Gelu { x } => {
                let xv = val(x);
                acc(x, &mut |dx| {
                    for j in 0..g.len() {
                        dx[j] += g[j] * gelu_parts(xv[j]).1;
                    }
                })
            }
            &Op::Sigmoid { x } => {
                let yv = nodes[i].value.data();
                acc(x, &mut |dx| {
                    for j in 0..g.len() {
                        dx[j] += g[j] * yv[j] * (1.0 - yv[j]);
                    }
                })
            }
            &Op::Log { x } => {
                let xv = val(x);
                acc(x, &mut |dx| {
                    for j in 0..g.len() {
                        if xv[j] > LOG_FLOOR {
                            dx[j] += g[j] / xv[j];
                        }
                    }
                })
            }
            &Op::Clamp { x, lo, hi } => {
                let xv = val(x);
                acc(x, &mut |dx| {
                    for j in 0..g.len() {
                        if xv[j] >= lo && xv[j] <= hi {
                            dx[j] += g[j];
                        }
                    }
                })
            }
            &Op::Softmax { x } => {
                let yv = nodes[i].value.data();
                let n = nodes[i].value.last_dim();
                acc(x, &mut |dx| {
                    for r in 0..yv.len() / n {
                        let ys = &yv[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            dx[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = nodes[gamma.0].value.numel();
                let gv = val(*gamma);
                let rows = xhat.len() / d;
                acc(*gamma, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                });
                if rg(*x) {
                    acc(*x, &mut |dx| {
                        let mut dh = vec![0.0; d];
                        for r in 0..rows {
                            let hs = &xhat[r * d..(r + 1) * d];
                            for j in 0..d {
                                dh[j] = g[r * d + j] * gv[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h =
                                dh.iter().zip(hs).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                dx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - hs[j] * mean_dh_h);
                            }
                        }
                    });
                }
            }
            Op::Concat { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for &(p, w) in parts {
                    acc(p, &mut |dp| {
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            &Op::Slice { x, start, width } => {
                let n = nodes[x.0].value.last_dim();
                acc(x, &mut |dx| {
                    for r in 0..g.len() / width {
                        for j in 0..width {
                            dx[r * n + start + j] += g[r * width + j];
                        }
                    }
                })
            }
            &Op::Reshape { x } => acc(x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, g)| *d += g)),
            Op::Dropout { x, mask } => acc(*x, &mut |dx| {
                for j in 0..g.len() {
                    dx[j] += g[j] * mask[j];
                }
            }),
            &Op::SumLast { x, n } => acc(x, &mut |dx| {
                for (j, d) in dx.iter_mut().enumerate() {
                    *d += g[j / n];
                }
            }),
            &Op::SumAll { x } => acc(x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            &Op::TokenLinear {
                x,
                w,
                tokens,
                din,
                dout,
            } => {
                let (xv, wv) = (val(x), val(w));
                let batch = xv.len() / (tokens * din);
                acc(x, &mut |dx| {
                    for b in 0..batch {
                        for t in 0..tokens {
                            let xi = (b * tokens + t) * din;
                            let oi = (b * tokens + t) * dout;
                            gemm_nt(
                                &g[oi..oi + dout],
                                &wv[t * din * dout..(t + 1) * din * dout],
                                &mut dx[xi..xi + din],
                                1,
                                dout,
                                din,
                            );
                        }
                    }
                });
                acc(w, &mut |dw| {
                    for b in 0..batch {
                        for t in 0..tokens {
                            let xi = (b * tokens + t) * din;
                            let oi = (b * tokens + t) * dout;
                            gemm_tn(
                                &xv[xi..xi + din],
                                &g[oi..oi + dout],
                                &mut dw[t * din * dout..(t + 1) * din * dout],
                                1,
                                din,
                                dout,
                            );
                        }
                    }
                });
            }
            Op::Im2Col { x, geom } => acc(*x, &mut |dx| {
                im2col_walk(geom, |dst, s| dx[s] += g[dst]);
            }),
        }
    }
}

// Visits every (patch element, source element) pair inside the image;
// padded positions are skipped.
fn im2col_walk(geom: &ConvGeometry, mut visit: impl FnMut(usize, usize)) {
    let (ho, wo, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
    let c = geom.channels;
    for b in 0..geom.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = ((b * ho + oy) * wo + ox) * pl;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        let src = ((b * geom.height + iy as usize) * geom.width + ix as usize) * c;
                        let dst = base + (ky * geom.kernel + kx) * c;
                        for ch in 0..c {
                            visit(dst + ch, src + ch);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::eye(2));
        let b = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut g = Graph::new();
        let a = g.constant(t(&[1, 2], &[1., 2.]));
        let b = g.constant(t(&[2, 1], &[3., 4.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(
            msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2,
            "{msg}"
        );
    }

    #[test]
    fn batched_matmul_matches_per_slice() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 2, 1], &[1., 1., 2., 0.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1, 1]);
        assert_eq!(g.value(c).data(), &[3., 6.]);
    }

    #[test]
    fn softmax_uniform_and_log_ratio() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let y = g.softmax(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let x = g.constant(Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = g.softmax(x).unwrap();
        for (got, want) in g.value(y).data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.3, -1.2, 2.5]));
        let xs = g.scale_shift(x, 1.0, 100.0).unwrap();
        let a = g.softmax(x).unwrap();
        let b = g.softmax(xs).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 4], 3.5));
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 1]));
        let p = g.constant(Tensor::ones(&[1]));
        assert!(g.layer_norm(x, p, p, 1e-5).is_err());
    }

    #[test]
    fn concat_shape_law() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[5, 32]));
        let b = g.constant(Tensor::ones(&[5, 32]));
        let c = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[5, 64]);
        assert_eq!(g.value(c).row(0)[31..33], [0.0, 1.0]);
    }

    #[test]
    fn dropout_degenerate_cases() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[10], 2.0));
        let mut rng = Rng::new(0);
        let y = g.dropout(x, 0.0, &mut Mode::Train(&mut rng)).unwrap();
        assert_eq!(y, x);
        let y = g.dropout(x, 0.5, &mut Mode::Eval).unwrap();
        assert_eq!(y, x);
        assert!(g.dropout(x, 1.0, &mut Mode::Eval).is_err());
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[4000], 1.0));
        let mut rng = Rng::new(5);
        let y = g.dropout(x, 0.5, &mut Mode::Train(&mut rng)).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let zeros = v.iter().filter(|&&e| e == 0.0).count() as f64 / v.len() as f64;
        assert!((zeros - 0.5).abs() < 0.05);
    }

    #[test]
    fn sigmoid_zero_and_log_clamp() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, -3.0]));
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let l = g.log(x).unwrap();
        assert_eq!(g.value(l).data(), &[LOG_FLOOR.ln(), LOG_FLOOR.ln()]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e308]));
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn backward_linear_and_sigmoid() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let x = g.constant(Tensor::vector(vec![3.0, 4.0, 5.0]));
        let p = g.mul(w, x).unwrap();
        let loss = g.sum_all(p).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[3.0, 4.0, 5.0]);

        let mut g = Graph::new();
        let w = g.param(Tensor::scalar(0.0));
        let x = g.constant(Tensor::scalar(1.0));
        let wx = g.mul(w, x).unwrap();
        let s = g.sigmoid(wx).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().item(), 0.25);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]));
        let loss = g.sum_all(w).unwrap();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        assert!(g.grad(w).is_none());
        assert!(matches!(g.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn im2col_picks_patches() {
        let mut g = Graph::new();
        // 1×3×3×1 image 1..9, 3×3 kernel, stride 2, pad 1 -> 2×2 patches.
        let x = g.constant(t(&[1, 3, 3, 1], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let p = g.im2col(x, 3, 2, 1).unwrap();
        assert_eq!(g.shape(p), &[1, 2, 2, 9]);
        let v = g.value(p);
        assert_eq!(v.row(0), &[0., 0., 0., 0., 1., 2., 0., 4., 5.]);
        assert_eq!(v.row(3), &[5., 6., 0., 8., 9., 0., 0., 0., 0.]);
    }
}
