//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive evaluates eagerly, appends a node holding its value and its
//! input ids, and refuses to produce non-finite values. Node ids grow
//! monotonically, so the tape is always in topological order and `backward`
//! is a single reverse sweep.

use super::kernels::{self, ConvSpec};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which elements share normalization statistics.
#[derive(Clone, Debug, PartialEq)]
pub enum NormStats {
    /// One mean/variance over every `(c, t)` (gLN).
    Global,
    /// Per time step over channels (cLN).
    PerFrame,
    /// Per channel over time (batch norm with batch size one, training mode).
    PerChannel,
    /// Externally supplied per-channel statistics (batch norm inference).
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv1d { x: usize, k: usize, spec: ConvSpec },
    ConvTranspose1d { x: usize, k: usize, stride: usize },
    Depthwise { x: usize, k: usize, spec: ConvSpec },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddChannels { x: usize, b: usize },
    MulChannels { x: usize, s: usize },
    MulSuffix { x: usize, w: usize },
    Expand(usize),
    Relu(usize),
    Prelu { x: usize, alpha: usize },
    Sigmoid(usize),
    Sqrt(usize),
    Cos(usize),
    Sin(usize),
    Ln(usize),
    Square(usize),
    Atan2 { im: usize, re: usize },
    Hypot { re: usize, im: usize },
    Scale(usize, f64),
    AddScalar(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Sum(usize),
    Mean(usize),
    Normalize {
        x: usize,
        scale: usize,
        shift: usize,
        stats: NormStats,
        /// (mean, 1/sqrt(var + ε)) per statistics group.
        moments: Vec<(f64, f64)>,
    },
    ConcatRows(Vec<usize>),
    SliceRows { x: usize, start: usize },
    Reshape(usize),
    PadTime { x: usize, left: usize },
    CropTime { x: usize, start: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv1d { .. } => "conv1d",
            Op::ConvTranspose1d { .. } => "conv_transpose1d",
            Op::Depthwise { .. } => "depthwise_conv1d",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddChannels { .. } => "add_channels",
            Op::MulChannels { .. } => "mul_channels",
            Op::MulSuffix { .. } => "mul_suffix",
            Op::Expand(_) => "expand",
            Op::Relu(_) => "relu",
            Op::Prelu { .. } => "prelu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Sqrt(_) => "sqrt",
            Op::Cos(_) => "cos",
            Op::Sin(_) => "sin",
            Op::Ln(_) => "ln",
            Op::Square(_) => "square",
            Op::Atan2 { .. } => "atan2",
            Op::Hypot { .. } => "hypot",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Clamp { .. } => "clamp",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Normalize { .. } => "normalize",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape(_) => "reshape",
            Op::PadTime { .. } => "pad_time",
            Op::CropTime { .. } => "crop_time",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv1d { x, k, .. } | Op::ConvTranspose1d { x, k, .. } | Op::Depthwise { x, k, .. } => {
                vec![*x, *k]
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::AddChannels { x, b } => vec![*x, *b],
            Op::MulChannels { x, s } => vec![*x, *s],
            Op::MulSuffix { x, w } => vec![*x, *w],
            Op::Prelu { x, alpha } => vec![*x, *alpha],
            Op::Atan2 { im, re } => vec![*im, *re],
            Op::Hypot { re, im } => vec![*re, *im],
            Op::Normalize { x, scale, shift, .. } => vec![*x, *scale, *shift],
            Op::ConcatRows(v) => v.clone(),
            Op::Expand(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sqrt(a)
            | Op::Cos(a)
            | Op::Sin(a)
            | Op::Ln(a)
            | Op::Square(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Clamp { x, .. } | Op::SliceRows { x, .. } | Op::PadTime { x, .. } | Op::CropTime { x, .. } => {
                vec![*x]
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`, or `None` if it does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Number of recorded ops (non-leaf nodes) whose backward rule ran.
    pub fn visited_ops(&self) -> usize {
        self.visited
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: Vec<f64>) {
    match slot {
        Some(g) => {
            for (d, c) in g.iter_mut().zip(contribution) {
                *d += c;
            }
        }
        None => *slot = Some(contribution),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Number of recorded primitive ops (excludes leaves and parameters) that
    /// take part in differentiation.
    pub fn differentiable_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.requires_grad && !matches!(n.op, Op::Leaf | Op::Param(_)))
            .count()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            let pos = value.data().iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::numeric(
                op.name(),
                format!("non-finite output at flat index {pos}"),
            ));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        let var = self.push(value, Op::Leaf)?;
        self.nodes[var.0].requires_grad = requires_grad;
        Ok(var)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        let var = self.push(p.value.clone(), Op::Param(id))?;
        self.nodes[var.0].requires_grad = p.trainable;
        Ok(var)
    }

    /// Parameter ids and their tape nodes, in recording order.
    pub(crate) fn param_nodes(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }

    fn v(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    // ---- convolutions -------------------------------------------------

    pub fn conv1d(&mut self, x: Var, k: Var, spec: ConvSpec) -> Result<Var> {
        let out = kernels::conv1d(self.v(x), self.v(k), spec)?;
        self.push(out, Op::Conv1d { x: x.0, k: k.0, spec })
    }

    pub fn conv_transpose1d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let out = kernels::conv_transpose1d(self.v(x), self.v(k), stride)?;
        self.push(out, Op::ConvTranspose1d { x: x.0, k: k.0, stride })
    }

    pub fn depthwise_conv1d(&mut self, x: Var, k: Var, spec: ConvSpec) -> Result<Var> {
        let out = kernels::depthwise_conv1d(self.v(x), self.v(k), spec)?;
        self.push(out, Op::Depthwise { x: x.0, k: k.0, spec })
    }

    // ---- binary elementwise ------------------------------------------

    fn zip(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.v(a), self.v(b));
        same_shape(op, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.v(a), self.v(b))?;
        if let Some(pos) = self.v(b).data().iter().position(|&d| d == 0.0) {
            return Err(Error::numeric(
                "div",
                format!("division by zero at flat index {pos} of divisor {:?}", self.shape(b)),
            ));
        }
        let out = self.zip("div", a, b, |x, y| x / y)?;
        self.push(out, Op::Div(a.0, b.0))
    }

    // ---- broadcasting patterns ---------------------------------------

    fn channel_check(&self, op: &'static str, x: Var, c: Var) -> Result<(usize, usize)> {
        let (ch, t) = self.v(x).dims2(op)?;
        if self.v(c).numel() != ch {
            return Err(Error::dim(
                op,
                format!("{} per-channel values for {ch} channels", self.v(c).numel()),
            ));
        }
        Ok((ch, t))
    }

    /// `x[c, t] + b[c]`.
    pub fn add_channels(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, t) = self.channel_check("add_channels", x, b)?;
        let bv = self.v(b).data();
        let data = self.v(x).data().iter().enumerate().map(|(i, &v)| v + bv[i / t]).collect();
        let out = Tensor::new(self.shape(x), data)?;
        self.push(out, Op::AddChannels { x: x.0, b: b.0 })
    }

    /// `x[c, t] · s[c]`.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, t) = self.channel_check("mul_channels", x, s)?;
        let sv = self.v(s).data();
        let data = self.v(x).data().iter().enumerate().map(|(i, &v)| v * sv[i / t]).collect();
        let out = Tensor::new(self.shape(x), data)?;
        self.push(out, Op::MulChannels { x: x.0, s: s.0 })
    }

    /// Multiplies `x` by `w` repeated over the leading axes; `w`'s shape must
    /// equal the trailing axes of `x`.
    pub fn mul_suffix(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() > xs.len() || xs[xs.len() - ws.len()..] != *ws {
            return Err(Error::dim(
                "mul_suffix",
                format!("{ws:?} is not a suffix of {xs:?}"),
            ));
        }
        let wv = self.v(w).data();
        let n = wv.len();
        let data = self.v(x).data().iter().enumerate().map(|(i, &v)| v * wv[i % n]).collect();
        let out = Tensor::new(xs, data)?;
        self.push(out, Op::MulSuffix { x: x.0, w: w.0 })
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        if self.v(s).numel() != 1 {
            return Err(Error::dim("expand", "only one-element tensors can be expanded"));
        }
        let out = Tensor::full(shape, self.v(s).item());
        self.push(out, Op::Expand(s.0))
    }

    // ---- unary elementwise -------------------------------------------

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.v(x).map(f);
        self.push(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Relu(x.0), |v| v.max(0.0))
    }

    /// Parametric ReLU with one slope per channel of a `[C × T]` input.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (_, t) = self.channel_check("prelu", x, alpha)?;
        let a = self.v(alpha).data();
        let data = self
            .v(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[i / t] * v })
            .collect();
        let out = Tensor::new(self.shape(x), data)?;
        self.push(out, Op::Prelu { x: x.0, alpha: alpha.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sigmoid(x.0), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(pos) = self.v(x).data().iter().position(|&v| v < 0.0) {
            return Err(Error::numeric("sqrt", format!("negative operand at flat index {pos}")));
        }
        self.unary(x, Op::Sqrt(x.0), f64::sqrt)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Cos(x.0), f64::cos)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Sin(x.0), f64::sin)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(pos) = self.v(x).data().iter().position(|&v| v <= 0.0) {
            return Err(Error::numeric("ln", format!("non-positive operand at flat index {pos}")));
        }
        self.unary(x, Op::Ln(x.0), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::Square(x.0), |v| v * v)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::Scale(x.0, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Op::AddScalar(x.0), |v| v + c)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, Op::Clamp { x: x.0, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Four-quadrant arctangent of `(im, re)`; `atan2(0, 0) = 0`.
    pub fn atan2(&mut self, im: Var, re: Var) -> Result<Var> {
        let out = self.zip("atan2", im, re, f64::atan2)?;
        self.push(out, Op::Atan2 { im: im.0, re: re.0 })
    }

    /// Complex modulus `sqrt(re² + im²)`, with a zero subgradient at the origin.
    pub fn hypot(&mut self, re: Var, im: Var) -> Result<Var> {
        let out = self.zip("hypot", re, im, |a, b| (a * a + b * b).sqrt())?;
        self.push(out, Op::Hypot { re: re.0, im: im.0 })
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.v(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.v(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x.0))
    }

    /// `Σ a·b` as a one-element tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum(p)
    }

    // ---- normalization -------------------------------------------------

    /// Normalizes a `[C × T]` input with the requested statistics, then applies
    /// a per-channel affine `scale · x̂ + shift`. `NORM_EPS` is added to every
    /// variance.
    pub fn normalize(&mut self, x: Var, stats: NormStats, scale: Var, shift: Var) -> Result<Var> {
        let (c, t) = self.channel_check("normalize", x, scale)?;
        self.channel_check("normalize", x, shift)?;
        let xv = self.v(x).data();
        let moments = |vals: &mut dyn Iterator<Item = f64>, n: usize| -> (f64, f64) {
            let vals: Vec<f64> = vals.collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            (mean, 1.0 / (var + NORM_EPS).sqrt())
        };
        let groups: Vec<(f64, f64)> = match &stats {
            NormStats::Global => vec![moments(&mut xv.iter().copied(), c * t)],
            NormStats::PerFrame => (0..t)
                .map(|tt| moments(&mut (0..c).map(|cc| xv[cc * t + tt]), c))
                .collect(),
            NormStats::PerChannel => (0..c)
                .map(|cc| moments(&mut xv[cc * t..(cc + 1) * t].iter().copied(), t))
                .collect(),
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("normalize", "fixed statistics do not match channels"));
                }
                mean.iter().zip(var).map(|(&m, &v)| (m, 1.0 / (v + NORM_EPS).sqrt())).collect()
            }
        };
        let sc = self.v(scale).data();
        let sh = self.v(shift).data();
        let mut out = vec![0.0; c * t];
        for cc in 0..c {
            for tt in 0..t {
                let (m, inv) = groups[group_of(&stats, cc, tt)];
                let i = cc * t + tt;
                out[i] = (xv[i] - m) * inv * sc[cc] + sh[cc];
            }
        }
        let out = Tensor::new(&[c, t], out)?;
        self.push(
            out,
            Op::Normalize {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
                stats,
                moments: groups,
            },
        )
    }

    /// Per-group statistics recorded by the most recent normalize node for `var`.
    pub fn norm_moments(&self, var: Var) -> Option<&[(f64, f64)]> {
        match &self.nodes[var.0].op {
            Op::Normalize { moments, .. } => Some(moments),
            _ => None,
        }
    }

    // ---- shape manipulation -------------------------------------------

    /// Stacks 2-D inputs with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "nothing to concatenate"))?;
        let (_, cols) = self.v(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = self.v(*p).dims2("concat_rows")?;
            if c != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("column count {c} differs from {cols}"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.v(*p).data());
        }
        let out = Tensor::new(&[rows, cols], data)?;
        self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.v(x).dims2("slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} out of 0..{rows}", start + len),
            ));
        }
        let data = self.v(x).data()[start * cols..(start + len) * cols].to_vec();
        let out = Tensor::new(&[len, cols], data)?;
        self.push(out, Op::SliceRows { x: x.0, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.v(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x.0))
    }

    /// Zero-pads the last axis of a `[C × T]` tensor.
    pub fn pad_time(&mut self, x: Var, left: usize, right: usize) -> Result<Var> {
        let (c, t) = self.v(x).dims2("pad_time")?;
        let tp = t + left + right;
        let mut data = vec![0.0; c * tp];
        let xv = self.v(x).data();
        for cc in 0..c {
            data[cc * tp + left..cc * tp + left + t].copy_from_slice(&xv[cc * t..(cc + 1) * t]);
        }
        let out = Tensor::new(&[c, tp], data)?;
        self.push(out, Op::PadTime { x: x.0, left })
    }

    /// Keeps samples `start..start + len` of the last axis of a `[C × T]` tensor.
    pub fn crop_time(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, t) = self.v(x).dims2("crop_time")?;
        if len == 0 || start + len > t {
            return Err(Error::dim(
                "crop_time",
                format!("samples {start}..{} out of 0..{t}", start + len),
            ));
        }
        let xv = self.v(x).data();
        let mut data = Vec::with_capacity(c * len);
        for cc in 0..c {
            data.extend_from_slice(&xv[cc * t + start..cc * t + start + len]);
        }
        let out = Tensor::new(&[c, len], data)?;
        self.push(out, Op::CropTime { x: x.0, start })
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.v(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        let mut visited = 0;
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads, visited });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            visited += 1;
            for (input, contribution) in self.local_grads(node, &g)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                if let Some(pos) = contribution.iter().position(|v| !v.is_finite()) {
                    return Err(Error::numeric(
                        node.op.name(),
                        format!("non-finite gradient at flat index {pos} of input node {input}"),
                    ));
                }
                accumulate(&mut grads[input], contribution);
            }
        }
        Ok(Gradients { grads, visited })
    }

    /// Vector-Jacobian products of one node for each of its inputs.
    fn local_grads(&self, node: &Node, g: &[f64]) -> Result<Vec<(usize, Vec<f64>)>> {
        let val = |i: usize| self.nodes[i].value.data();
        let need = |i: usize| self.nodes[i].requires_grad;
        let out = node.value.data();
        let map1 = |x: usize, f: &dyn Fn(usize) -> f64| -> Vec<(usize, Vec<f64>)> {
            vec![(x, (0..g.len()).map(f).collect())]
        };
        Ok(match &node.op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Conv1d { x, k, spec } => {
                let (gx, gk) = kernels::conv1d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*k].value,
                    *spec,
                    g,
                    need(*x),
                    need(*k),
                );
                gx.map(|v| (*x, v)).into_iter().chain(gk.map(|v| (*k, v))).collect()
            }
            Op::ConvTranspose1d { x, k, stride } => {
                let (gx, gk) = kernels::conv_transpose1d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*k].value,
                    *stride,
                    g,
                    need(*x),
                    need(*k),
                );
                gx.map(|v| (*x, v)).into_iter().chain(gk.map(|v| (*k, v))).collect()
            }
            Op::Depthwise { x, k, spec } => {
                let (gx, gk) = kernels::depthwise_conv1d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*k].value,
                    *spec,
                    g,
                    need(*x),
                    need(*k),
                );
                gx.map(|v| (*x, v)).into_iter().chain(gk.map(|v| (*k, v))).collect()
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(va).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                vec![
                    (*a, g.iter().zip(vb).map(|(g, y)| g / y).collect()),
                    (
                        *b,
                        g.iter().zip(out).zip(vb).map(|((g, q), y)| -g * q / y).collect(),
                    ),
                ]
            }
            Op::AddChannels { x, b } => {
                let c = val(*b).len();
                let t = g.len() / c;
                let gb = (0..c).map(|cc| g[cc * t..(cc + 1) * t].iter().sum()).collect();
                vec![(*x, g.to_vec()), (*b, gb)]
            }
            Op::MulChannels { x, s } => {
                let (vx, vs) = (val(*x), val(*s));
                let c = vs.len();
                let t = g.len() / c;
                let gx = g.iter().enumerate().map(|(i, g)| g * vs[i / t]).collect();
                let gs = (0..c)
                    .map(|cc| (cc * t..(cc + 1) * t).map(|i| g[i] * vx[i]).sum())
                    .collect();
                vec![(*x, gx), (*s, gs)]
            }
            Op::MulSuffix { x, w } => {
                let (vx, vw) = (val(*x), val(*w));
                let n = vw.len();
                let gx = g.iter().enumerate().map(|(i, g)| g * vw[i % n]).collect();
                let mut gw = vec![0.0; n];
                for (i, (&gi, &xi)) in g.iter().zip(vx).enumerate() {
                    gw[i % n] += gi * xi;
                }
                vec![(*x, gx), (*w, gw)]
            }
            Op::Expand(s) => vec![(*s, vec![g.iter().sum()])],
            Op::Relu(x) => {
                let vx = val(*x);
                map1(*x, &|i| if vx[i] > 0.0 { g[i] } else { 0.0 })
            }
            Op::Prelu { x, alpha } => {
                let (vx, va) = (val(*x), val(*alpha));
                let c = va.len();
                let t = g.len() / c;
                let gx = (0..g.len())
                    .map(|i| if vx[i] > 0.0 { g[i] } else { va[i / t] * g[i] })
                    .collect();
                let ga = (0..c)
                    .map(|cc| {
                        (cc * t..(cc + 1) * t)
                            .filter(|&i| vx[i] <= 0.0)
                            .map(|i| g[i] * vx[i])
                            .sum()
                    })
                    .collect();
                vec![(*x, gx), (*alpha, ga)]
            }
            Op::Sigmoid(x) => map1(*x, &|i| g[i] * out[i] * (1.0 - out[i])),
            Op::Sqrt(x) => map1(*x, &|i| g[i] / (2.0 * out[i])),
            Op::Cos(x) => {
                let vx = val(*x);
                map1(*x, &|i| -g[i] * vx[i].sin())
            }
            Op::Sin(x) => {
                let vx = val(*x);
                map1(*x, &|i| g[i] * vx[i].cos())
            }
            Op::Ln(x) => {
                let vx = val(*x);
                map1(*x, &|i| g[i] / vx[i])
            }
            Op::Square(x) => {
                let vx = val(*x);
                map1(*x, &|i| 2.0 * g[i] * vx[i])
            }
            Op::Scale(x, c) => map1(*x, &|i| g[i] * c),
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Clamp { x, lo, hi } => {
                let vx = val(*x);
                map1(*x, &|i| if vx[i] >= *lo && vx[i] <= *hi { g[i] } else { 0.0 })
            }
            Op::Atan2 { im, re } => {
                let (vi, vr) = (val(*im), val(*re));
                let r2 = |i: usize| vr[i] * vr[i] + vi[i] * vi[i];
                let gi = (0..g.len())
                    .map(|i| if r2(i) > 0.0 { g[i] * vr[i] / r2(i) } else { 0.0 })
                    .collect();
                let gr = (0..g.len())
                    .map(|i| if r2(i) > 0.0 { -g[i] * vi[i] / r2(i) } else { 0.0 })
                    .collect();
                vec![(*im, gi), (*re, gr)]
            }
            Op::Hypot { re, im } => {
                let (vr, vi) = (val(*re), val(*im));
                let gr = (0..g.len())
                    .map(|i| if out[i] > 0.0 { g[i] * vr[i] / out[i] } else { 0.0 })
                    .collect();
                let gi = (0..g.len())
                    .map(|i| if out[i] > 0.0 { g[i] * vi[i] / out[i] } else { 0.0 })
                    .collect();
                vec![(*re, gr), (*im, gi)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Normalize {
                x,
                scale,
                shift,
                stats,
                moments,
            } => self.normalize_backward(*x, *scale, *shift, stats, moments, g),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = val(p).len();
                        let part = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, part)
                    })
                    .collect()
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.shape()[1];
                let mut gx = vec![0.0; val(*x).len()];
                gx[start * cols..start * cols + g.len()].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::PadTime { x, left } => {
                let xs = self.nodes[*x].value.shape();
                let (c, t) = (xs[0], xs[1]);
                let tp = node.value.shape()[1];
                let mut gx = Vec::with_capacity(c * t);
                for cc in 0..c {
                    gx.extend_from_slice(&g[cc * tp + left..cc * tp + left + t]);
                }
                vec![(*x, gx)]
            }
            Op::CropTime { x, start } => {
                let xs = self.nodes[*x].value.shape();
                let (c, t) = (xs[0], xs[1]);
                let len = node.value.shape()[1];
                let mut gx = vec![0.0; c * t];
                for cc in 0..c {
                    gx[cc * t + start..cc * t + start + len]
                        .copy_from_slice(&g[cc * len..(cc + 1) * len]);
                }
                vec![(*x, gx)]
            }
        })
    }

    fn normalize_backward(
        &self,
        x: usize,
        scale: usize,
        shift: usize,
        stats: &NormStats,
        moments: &[(f64, f64)],
        g: &[f64],
    ) -> Vec<(usize, Vec<f64>)> {
        let xs = self.nodes[x].value.shape();
        let (c, t) = (xs[0], xs[1]);
        let xv = self.nodes[x].value.data();
        let sc = self.nodes[scale].value.data();
        let xhat = |cc: usize, tt: usize| {
            let (m, inv) = moments[group_of(stats, cc, tt)];
            (xv[cc * t + tt] - m) * inv
        };
        let mut gscale = vec![0.0; c];
        let mut gshift = vec![0.0; c];
        for cc in 0..c {
            for tt in 0..t {
                let gi = g[cc * t + tt];
                gscale[cc] += gi * xhat(cc, tt);
                gshift[cc] += gi;
            }
        }
        // dL/dx̂ = g·scale; for batch statistics the standard layer-norm
        // reduction applies per group, for fixed statistics it is a plain
        // rescale.
        let mut gx = vec![0.0; c * t];
        let ghat = |cc: usize, tt: usize| g[cc * t + tt] * sc[cc];
        let group_members: Vec<Vec<(usize, usize)>> = match stats {
            NormStats::Global => vec![(0..c).flat_map(|cc| (0..t).map(move |tt| (cc, tt))).collect()],
            NormStats::PerFrame => (0..t).map(|tt| (0..c).map(|cc| (cc, tt)).collect()).collect(),
            NormStats::PerChannel => (0..c).map(|cc| (0..t).map(|tt| (cc, tt)).collect()).collect(),
            NormStats::Fixed { .. } => {
                for cc in 0..c {
                    let inv = moments[cc].1;
                    for tt in 0..t {
                        gx[cc * t + tt] = ghat(cc, tt) * inv;
                    }
                }
                return vec![(x, gx), (scale, gscale), (shift, gshift)];
            }
        };
        for (gid, members) in group_members.iter().enumerate() {
            let n = members.len() as f64;
            let inv = moments[gid].1;
            let sum_g: f64 = members.iter().map(|&(cc, tt)| ghat(cc, tt)).sum();
            let sum_gx: f64 = members.iter().map(|&(cc, tt)| ghat(cc, tt) * xhat(cc, tt)).sum();
            for &(cc, tt) in members {
                gx[cc * t + tt] = inv / n * (n * ghat(cc, tt) - sum_g - xhat(cc, tt) * sum_gx);
            }
        }
        vec![(x, gx), (scale, gscale), (shift, gshift)]
    }
}

fn group_of(stats: &NormStats, c: usize, t: usize) -> usize {
    match stats {
        NormStats::Global => 0,
        NormStats::PerFrame => t,
        NormStats::PerChannel | NormStats::Fixed { .. } => c,
    }
}
