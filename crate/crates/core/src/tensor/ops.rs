//! Forward evaluation and gradient rules for every recorded operation.

use super::graph::{Node, NodeId};
use super::scalar::{gemm, Scalar};
use crate::sigproc::conv;
use crate::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Pointwise nonlinearities. GELU uses the tanh approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Gelu,
    Silu,
    Exp,
    Log,
    Sin,
    Softplus,
    Square,
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    /// `a[m,k] . b[k,n]`, or `a . b^T` with `b` stored `[n,k]` when `b_trans`.
    MatMul {
        a: NodeId,
        b: NodeId,
        b_trans: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale {
        a: NodeId,
        c: f64,
    },
    AddScalar {
        a: NodeId,
        c: f64,
    },
    Unary {
        a: NodeId,
        kind: UnaryKind,
    },
    AddRow {
        x: NodeId,
        b: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    CausalMask(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis {
        a: NodeId,
        axis: usize,
    },
    MeanAxis {
        a: NodeId,
        axis: usize,
    },
    Embedding {
        table: NodeId,
        indices: Vec<usize>,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
    Reshape(NodeId),
    Rope {
        a: NodeId,
        positions: Vec<usize>,
        base: f64,
    },
    FftConv {
        u: NodeId,
        h: NodeId,
    },
    DepthwiseConv {
        x: NodeId,
        k: NodeId,
    },
    DecayWindow {
        alpha: NodeId,
        bias: NodeId,
        len: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } => vec![*a, *b],
            Add(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            Scale { a, .. } | AddScalar { a, .. } | Unary { a, .. } => vec![*a],
            AddRow { x, b } => vec![*x, *b],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            SoftmaxRows(a) | LogSoftmaxRows(a) | CausalMask(a) | Sum(a) | Mean(a) => vec![*a],
            SumAxis { a, .. } | MeanAxis { a, .. } => vec![*a],
            Embedding { table, .. } => vec![*table],
            SliceCols { a, .. } | Transpose(a) | Reshape(a) | Rope { a, .. } => vec![*a],
            ConcatCols(parts) => parts.clone(),
            FftConv { u, h } => vec![*u, *h],
            DepthwiseConv { x, k } => vec![*x, *k],
            DecayWindow { alpha, bias, .. } => vec![*alpha, *bias],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    pub(crate) fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            MatMul { .. } => "matmul",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale { .. } => "scale",
            AddScalar { .. } => "add_scalar",
            Unary { .. } => "unary",
            AddRow { .. } => "add_row",
            LayerNorm { .. } => "layer_norm",
            SoftmaxRows(_) => "softmax_rows",
            LogSoftmaxRows(_) => "log_softmax_rows",
            CausalMask(_) => "causal_mask",
            Sum(_) => "sum",
            Mean(_) => "mean",
            SumAxis { .. } => "sum_axis",
            MeanAxis { .. } => "mean_axis",
            Embedding { .. } => "embedding",
            SliceCols { .. } => "slice_cols",
            ConcatCols(_) => "concat_cols",
            Transpose(_) => "transpose",
            Reshape(_) => "reshape",
            Rope { .. } => "rope",
            FftConv { .. } => "fft_causal_conv",
            DepthwiseConv { .. } => "depthwise_causal_conv",
            DecayWindow { .. } => "decay_window",
            CrossEntropy { .. } => "cross_entropy",
        }
    }
}

pub(crate) struct Output<F> {
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub aux: Vec<F>,
}

impl<F> Output<F> {
    fn plain(shape: Vec<usize>, value: Vec<F>) -> Self {
        Output {
            shape,
            value,
            aux: Vec::new(),
        }
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::shape(format!(
            "{what} expects a 2-d tensor, got {shape:?}"
        ))),
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!(
            "{what}: shapes {a:?} and {b:?} differ"
        )));
    }
    Ok(())
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn gelu<F: Scalar>(x: F) -> F {
    let c = F::c(GELU_C);
    let a = F::c(GELU_A);
    let half = F::c(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::c(GELU_C);
    let a = F::c(GELU_A);
    let half = F::c(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::c(3.0) * a * x * x)
}

fn unary_forward<F: Scalar>(kind: UnaryKind, x: &[F]) -> Result<Vec<F>> {
    Ok(match kind {
        UnaryKind::Gelu => x.iter().map(|&v| gelu(v)).collect(),
        UnaryKind::Silu => x.iter().map(|&v| v * sigmoid(v)).collect(),
        UnaryKind::Exp => x.iter().map(|v| v.exp()).collect(),
        UnaryKind::Log => {
            if let Some(bad) = x.iter().find(|v| !(**v > F::zero())) {
                return Err(Error::numeric(format!("log of non-positive value {bad}")));
            }
            x.iter().map(|v| v.ln()).collect()
        }
        UnaryKind::Sin => x.iter().map(|v| v.sin()).collect(),
        UnaryKind::Softplus => x.iter().map(|&v| softplus(v)).collect(),
        UnaryKind::Square => x.iter().map(|&v| v * v).collect(),
    })
}

fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) -> Result<()> {
    let mut max = F::neg_infinity();
    for &v in row {
        if v.is_nan() {
            return Err(Error::numeric("NaN entering softmax"));
        }
        if v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        return Err(Error::numeric("softmax row is entirely masked"));
    }
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    let inv = F::one() / sum;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(())
}

pub(crate) fn forward<F: Scalar>(op: &Op, nodes: &[Node<F>]) -> Result<Output<F>> {
    let v = |id: NodeId| &nodes[id.0].value;
    let s = |id: NodeId| nodes[id.0].shape.as_slice();
    Ok(match op {
        Op::Leaf => unreachable!("leaves are never re-evaluated"),
        Op::MatMul { a, b, b_trans } => {
            let (m, k) = dims2(s(*a), "matmul lhs")?;
            let (r, c) = dims2(s(*b), "matmul rhs")?;
            let (bk, n) = if *b_trans { (c, r) } else { (r, c) };
            if bk != k {
                return Err(Error::shape(format!(
                    "matmul inner extents differ: {:?} x {:?}{}",
                    s(*a),
                    s(*b),
                    if *b_trans { "^T" } else { "" }
                )));
            }
            let mut out = vec![F::zero(); m * n];
            gemm(m, k, n, v(*a), false, v(*b), *b_trans, &mut out, false);
            Output::plain(vec![m, n], out)
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            same_shape(s(*a), s(*b), op.name())?;
            let (x, y) = (v(*a), v(*b));
            let out = match op {
                Op::Add(..) => x.iter().zip(y).map(|(&p, &q)| p + q).collect(),
                Op::Sub(..) => x.iter().zip(y).map(|(&p, &q)| p - q).collect(),
                _ => x.iter().zip(y).map(|(&p, &q)| p * q).collect(),
            };
            Output::plain(s(*a).to_vec(), out)
        }
        Op::Scale { a, c } => {
            let c = F::c(*c);
            Output::plain(s(*a).to_vec(), v(*a).iter().map(|&x| x * c).collect())
        }
        Op::AddScalar { a, c } => {
            let c = F::c(*c);
            Output::plain(s(*a).to_vec(), v(*a).iter().map(|&x| x + c).collect())
        }
        Op::Unary { a, kind } => Output::plain(s(*a).to_vec(), unary_forward(*kind, v(*a))?),
        Op::AddRow { x, b } => {
            let (m, n) = dims2(s(*x), "add_row")?;
            if s(*b) != [n] {
                return Err(Error::shape(format!(
                    "add_row: row vector {:?} does not match {:?}",
                    s(*b),
                    s(*x)
                )));
            }
            let bias = v(*b);
            let mut out = v(*x).clone();
            for r in 0..m {
                out[r * n..(r + 1) * n]
                    .iter_mut()
                    .zip(bias)
                    .for_each(|(o, &b)| *o += b);
            }
            Output::plain(vec![m, n], out)
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let (m, n) = dims2(s(*x), "layer_norm")?;
            if s(*gain) != [n] || s(*bias) != [n] {
                return Err(Error::shape(format!(
                    "layer_norm: gain {:?} / bias {:?} must be [{n}]",
                    s(*gain),
                    s(*bias)
                )));
            }
            let (xv, g, b) = (v(*x), v(*gain), v(*bias));
            let eps = F::c(*eps);
            let inv_n = F::one() / F::c(n as f64);
            let mut out = vec![F::zero(); m * n];
            let mut aux = vec![F::zero(); 2 * m];
            for r in 0..m {
                let row = &xv[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<F>() * inv_n;
                let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<F>() * inv_n;
                let rstd = F::one() / (var + eps).sqrt();
                aux[r] = mean;
                aux[m + r] = rstd;
                for j in 0..n {
                    out[r * n + j] = (row[j] - mean) * rstd * g[j] + b[j];
                }
            }
            Output {
                shape: vec![m, n],
                value: out,
                aux,
            }
        }
        Op::SoftmaxRows(a) | Op::LogSoftmaxRows(a) => {
            let (m, n) = dims2(s(*a), op.name())?;
            let x = v(*a);
            let mut out = vec![F::zero(); m * n];
            for r in 0..m {
                softmax_row(&x[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n])?;
            }
            if matches!(op, Op::LogSoftmaxRows(_)) {
                // log p computed from the stabilised logits, not ln of the
                // probabilities, so tiny probabilities keep full precision.
                for r in 0..m {
                    let row = &x[r * n..(r + 1) * n];
                    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                    let lse = max + row.iter().map(|&t| (t - max).exp()).sum::<F>().ln();
                    for j in 0..n {
                        out[r * n + j] = row[j] - lse;
                    }
                }
            }
            Output::plain(vec![m, n], out)
        }
        Op::CausalMask(a) => {
            let (m, n) = dims2(s(*a), "causal_mask")?;
            if m > n {
                return Err(Error::shape(format!(
                    "causal_mask needs rows <= cols, got [{m}, {n}]"
                )));
            }
            let off = n - m;
            let mut out = v(*a).clone();
            for i in 0..m {
                for j in (i + off + 1)..n {
                    out[i * n + j] = F::neg_infinity();
                }
            }
            Output::plain(vec![m, n], out)
        }
        Op::Sum(a) => Output::plain(vec![1], vec![v(*a).iter().copied().sum()]),
        Op::Mean(a) => {
            let x = v(*a);
            let mean = x.iter().copied().sum::<F>() / F::c(x.len() as f64);
            Output::plain(vec![1], vec![mean])
        }
        Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
            let (outer, len, inner) = axis_split(s(*a), *axis)?;
            let x = v(*a);
            let mut out = vec![F::zero(); outer * inner];
            for o in 0..outer {
                for t in 0..len {
                    let base = (o * len + t) * inner;
                    for i in 0..inner {
                        out[o * inner + i] += x[base + i];
                    }
                }
            }
            if matches!(op, Op::MeanAxis { .. }) {
                let inv = F::one() / F::c(len as f64);
                out.iter_mut().for_each(|x| *x *= inv);
            }
            Output::plain(reduced_shape(s(*a), *axis), out)
        }
        Op::Embedding { table, indices } => {
            let (vocab, d) = dims2(s(*table), "embedding table")?;
            if indices.is_empty() {
                return Err(Error::shape("embedding lookup of an empty index list"));
            }
            let tv = v(*table);
            let mut out = Vec::with_capacity(indices.len() * d);
            for &ix in indices {
                if ix >= vocab {
                    return Err(Error::shape(format!(
                        "token index {ix} >= vocab size {vocab}"
                    )));
                }
                out.extend_from_slice(&tv[ix * d..(ix + 1) * d]);
            }
            Output::plain(vec![indices.len(), d], out)
        }
        Op::SliceCols { a, start, len } => {
            let (m, n) = dims2(s(*a), "slice_cols")?;
            if *len == 0 || start + len > n {
                return Err(Error::shape(format!(
                    "slice_cols [{start}, {}) out of range for {n} columns",
                    start + len
                )));
            }
            let x = v(*a);
            let mut out = Vec::with_capacity(m * len);
            for r in 0..m {
                out.extend_from_slice(&x[r * n + start..r * n + start + len]);
            }
            Output::plain(vec![m, *len], out)
        }
        Op::ConcatCols(parts) => {
            if parts.is_empty() {
                return Err(Error::shape("concat_cols of zero tensors"));
            }
            let (m, _) = dims2(s(parts[0]), "concat_cols")?;
            let mut widths = Vec::with_capacity(parts.len());
            for &p in parts {
                let (pm, pn) = dims2(s(p), "concat_cols")?;
                if pm != m {
                    return Err(Error::shape(format!(
                        "concat_cols: row counts {m} and {pm} differ"
                    )));
                }
                widths.push(pn);
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(m * total);
            for r in 0..m {
                for (&p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&v(p)[r * w..(r + 1) * w]);
                }
            }
            Output::plain(vec![m, total], out)
        }
        Op::Transpose(a) => {
            let (m, n) = dims2(s(*a), "transpose")?;
            let x = v(*a);
            let mut out = vec![F::zero(); m * n];
            for r in 0..m {
                for c in 0..n {
                    out[c * m + r] = x[r * n + c];
                }
            }
            Output::plain(vec![n, m], out)
        }
        Op::Reshape(_) => unreachable!("reshape is evaluated by the graph"),
        Op::Rope { a, positions, base } => {
            let (l, hd) = dims2(s(*a), "rope")?;
            check_rope(l, hd, positions)?;
            let mut out = v(*a).clone();
            rope_rotate(&mut out, hd, positions, *base, false);
            Output::plain(vec![l, hd], out)
        }
        Op::FftConv { u, h } => {
            let (l, ch) = dims2(s(*u), "fft_causal_conv input")?;
            same_shape(s(*u), s(*h), "fft_causal_conv")?;
            Output::plain(vec![l, ch], conv::fft_causal_conv_cols(v(*u), v(*h), l, ch))
        }
        Op::DepthwiseConv { x, k } => {
            let (l, ch) = dims2(s(*x), "depthwise_causal_conv input")?;
            let (w, kch) = dims2(s(*k), "depthwise_causal_conv kernel")?;
            if kch != ch {
                return Err(Error::shape(format!(
                    "depthwise kernel has {kch} channels, input has {ch}"
                )));
            }
            if w > l {
                return Err(Error::shape(format!(
                    "kernel length {w} exceeds sequence length {l}"
                )));
            }
            Output::plain(
                vec![l, ch],
                conv::depthwise_causal_conv_cols(v(*x), v(*k), l, w, ch),
            )
        }
        Op::DecayWindow { alpha, bias, len } => {
            let ch = match s(*alpha) {
                [c] => *c,
                other => {
                    return Err(Error::shape(format!(
                        "window rates must be 1-d, got {other:?}"
                    )))
                }
            };
            if s(*bias) != [1] {
                return Err(Error::shape("window bias must be a single value"));
            }
            if *len == 0 {
                return Err(Error::shape("window length must be positive"));
            }
            let b = v(*bias)[0];
            let rates: Vec<F> = v(*alpha).iter().map(|&a| softplus(a)).collect();
            let inv_len = F::one() / F::c(*len as f64);
            let mut out = vec![F::zero(); len * ch];
            for n in 0..*len {
                let t = F::c(n as f64) * inv_len;
                for c in 0..ch {
                    out[n * ch + c] = (-rates[c] * t).exp() + b;
                }
            }
            Output::plain(vec![*len, ch], out)
        }
        Op::CrossEntropy { logits, targets } => {
            let (m, n) = dims2(s(*logits), "cross_entropy")?;
            if targets.len() != m {
                return Err(Error::shape(format!(
                    "cross_entropy: {} targets for {m} rows",
                    targets.len()
                )));
            }
            let x = v(*logits);
            let mut probs = vec![F::zero(); m * n];
            let mut total = F::zero();
            for r in 0..m {
                let t = targets[r];
                if t >= n {
                    return Err(Error::shape(format!("target index {t} >= {n} classes")));
                }
                let row = &x[r * n..(r + 1) * n];
                softmax_row(row, &mut probs[r * n..(r + 1) * n])?;
                let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<F>().ln();
                total += lse - row[t];
            }
            Output {
                shape: vec![1],
                value: vec![total / F::c(m as f64)],
                aux: probs,
            }
        }
    })
}

fn check_rope(l: usize, hd: usize, positions: &[usize]) -> Result<()> {
    if !hd.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "rotary embedding needs an even head dim, got {hd}"
        )));
    }
    if positions.len() != l {
        return Err(Error::shape(format!(
            "rotary embedding: {} positions for {l} rows",
            positions.len()
        )));
    }
    Ok(())
}

/// Rotates coordinate pairs `(x[2i], x[2i+1])` of each row by
/// `pos * base^(-2i/hd)`; `inverse` rotates by the negated angle.
pub(crate) fn rope_rotate<F: Scalar>(
    x: &mut [F],
    hd: usize,
    positions: &[usize],
    base: f64,
    inverse: bool,
) {
    let pairs = hd / 2;
    let inv_freq: Vec<f64> = (0..pairs)
        .map(|i| base.powf(-(2.0 * i as f64) / hd as f64))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut x[r * hd..(r + 1) * hd];
        for (i, &freq) in inv_freq.iter().enumerate() {
            let angle = pos as f64 * freq;
            let (sin, cos) = angle.sin_cos();
            let (sin, cos) = (F::c(if inverse { -sin } else { sin }), F::c(cos));
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * cos - b * sin;
            row[2 * i + 1] = a * sin + b * cos;
        }
    }
}

/// Adds `contrib` into the gradient slot of `id`, allocating it on first use.
fn acc<F: Scalar>(
    grads: &mut [Option<Vec<F>>],
    nodes: &[Node<F>],
    id: NodeId,
    f: impl FnOnce(&mut [F]),
) {
    if !nodes[id.0].requires_grad {
        return;
    }
    let slot = grads[id.0].get_or_insert_with(|| vec![F::zero(); nodes[id.0].value.len()]);
    f(slot);
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Applies the gradient rule of `node` given its output gradient `g`.
pub(crate) fn backward<F: Scalar>(
    node: &Node<F>,
    g: &[F],
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
) {
    let v = |id: NodeId| &nodes[id.0].value;
    let s = |id: NodeId| nodes[id.0].shape.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, b_trans } => {
            let (m, k) = (s(*a)[0], s(*a)[1]);
            let n = node.shape[1];
            acc(grads, nodes, *a, |da| {
                // da = g . B^T
                gemm(m, n, k, g, false, v(*b), !*b_trans, da, true);
            });
            acc(grads, nodes, *b, |db| {
                if *b_trans {
                    // stored [n,k]: d = g^T . a
                    gemm(n, m, k, g, true, v(*a), false, db, true);
                } else {
                    gemm(k, m, n, v(*a), true, g, false, db, true);
                }
            });
        }
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |d| add_into(d, g));
            acc(grads, nodes, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |d| add_into(d, g));
            acc(grads, nodes, *b, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g)
            });
        }
        Op::Mul(a, b) => {
            acc(grads, nodes, *a, |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(v(*b))
                    .for_each(|((d, &g), &y)| *d += g * y)
            });
            acc(grads, nodes, *b, |d| {
                d.iter_mut()
                    .zip(g)
                    .zip(v(*a))
                    .for_each(|((d, &g), &x)| *d += g * x)
            });
        }
        Op::Scale { a, c } => {
            let c = F::c(*c);
            acc(grads, nodes, *a, |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * c)
            });
        }
        Op::AddScalar { a, .. } => acc(grads, nodes, *a, |d| add_into(d, g)),
        Op::Unary { a, kind } => {
            let x = v(*a);
            let y = &node.value;
            acc(grads, nodes, *a, |d| {
                for i in 0..d.len() {
                    let local = match kind {
                        UnaryKind::Gelu => gelu_grad(x[i]),
                        UnaryKind::Silu => {
                            let sg = sigmoid(x[i]);
                            sg * (F::one() + x[i] * (F::one() - sg))
                        }
                        UnaryKind::Exp => y[i],
                        UnaryKind::Log => F::one() / x[i],
                        UnaryKind::Sin => x[i].cos(),
                        UnaryKind::Softplus => sigmoid(x[i]),
                        UnaryKind::Square => F::c(2.0) * x[i],
                    };
                    d[i] += g[i] * local;
                }
            });
        }
        Op::AddRow { x, b } => {
            let n = node.shape[1];
            acc(grads, nodes, *x, |d| add_into(d, g));
            acc(grads, nodes, *b, |d| {
                for row in g.chunks_exact(n) {
                    add_into(d, row);
                }
            });
        }
        Op::LayerNorm { x, gain, bias, .. } => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let (xv, gv) = (v(*x), v(*gain));
            let (means, rstds) = node.aux.split_at(m);
            let inv_n = F::one() / F::c(n as f64);
            acc(grads, nodes, *x, |dx| {
                let mut dyh = vec![F::zero(); n];
                for r in 0..m {
                    let (mean, rstd) = (means[r], rstds[r]);
                    let mut sum_dyh = F::zero();
                    let mut sum_dyh_xh = F::zero();
                    for j in 0..n {
                        dyh[j] = g[r * n + j] * gv[j];
                        let xh = (xv[r * n + j] - mean) * rstd;
                        sum_dyh += dyh[j];
                        sum_dyh_xh += dyh[j] * xh;
                    }
                    for j in 0..n {
                        let xh = (xv[r * n + j] - mean) * rstd;
                        dx[r * n + j] +=
                            rstd * (dyh[j] - inv_n * sum_dyh - xh * inv_n * sum_dyh_xh);
                    }
                }
            });
            acc(grads, nodes, *gain, |dg| {
                for r in 0..m {
                    for j in 0..n {
                        dg[j] += g[r * n + j] * (xv[r * n + j] - means[r]) * rstds[r];
                    }
                }
            });
            acc(grads, nodes, *bias, |db| {
                for row in g.chunks_exact(n) {
                    add_into(db, row);
                }
            });
        }
        Op::SoftmaxRows(a) => {
            let n = node.shape[1];
            let y = &node.value;
            acc(grads, nodes, *a, |d| {
                for ((dr, gr), yr) in d
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let dot: F = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmaxRows(a) => {
            let n = node.shape[1];
            let y = &node.value;
            acc(grads, nodes, *a, |d| {
                for ((dr, gr), yr) in d
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(y.chunks_exact(n))
                {
                    let gsum: F = gr.iter().copied().sum();
                    for j in 0..n {
                        dr[j] += gr[j] - yr[j].exp() * gsum;
                    }
                }
            });
        }
        Op::CausalMask(a) => {
            let (m, n) = (node.shape[0], node.shape[1]);
            let off = n - m;
            acc(grads, nodes, *a, |d| {
                for i in 0..m {
                    for j in 0..=(i + off) {
                        d[i * n + j] += g[i * n + j];
                    }
                }
            });
        }
        Op::Sum(a) => acc(grads, nodes, *a, |d| d.iter_mut().for_each(|d| *d += g[0])),
        Op::Mean(a) => {
            let scale = g[0] / F::c(v(*a).len() as f64);
            acc(grads, nodes, *a, |d| d.iter_mut().for_each(|d| *d += scale));
        }
        Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
            let (outer, len, inner) = axis_split(s(*a), *axis).expect("validated in forward");
            let scale = if matches!(node.op, Op::MeanAxis { .. }) {
                F::one() / F::c(len as f64)
            } else {
                F::one()
            };
            acc(grads, nodes, *a, |d| {
                for o in 0..outer {
                    for t in 0..len {
                        let base = (o * len + t) * inner;
                        for i in 0..inner {
                            d[base + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
        Op::Embedding { table, indices } => {
            let d_model = node.shape[1];
            acc(grads, nodes, *table, |d| {
                for (r, &ix) in indices.iter().enumerate() {
                    add_into(
                        &mut d[ix * d_model..(ix + 1) * d_model],
                        &g[r * d_model..(r + 1) * d_model],
                    );
                }
            });
        }
        Op::SliceCols { a, start, len } => {
            let n = s(*a)[1];
            acc(grads, nodes, *a, |d| {
                for (r, gr) in g.chunks_exact(*len).enumerate() {
                    add_into(&mut d[r * n + start..r * n + start + len], gr);
                }
            });
        }
        Op::ConcatCols(parts) => {
            let total = node.shape[1];
            let mut offset = 0;
            for &p in parts {
                let w = s(p)[1];
                acc(grads, nodes, p, |d| {
                    for (r, dr) in d.chunks_exact_mut(w).enumerate() {
                        add_into(dr, &g[r * total + offset..r * total + offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (s(*a)[0], s(*a)[1]);
            acc(grads, nodes, *a, |d| {
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] += g[c * m + r];
                    }
                }
            });
        }
        Op::Reshape(a) => acc(grads, nodes, *a, |d| add_into(d, g)),
        Op::Rope { a, positions, base } => {
            let hd = node.shape[1];
            acc(grads, nodes, *a, |d| {
                let mut back = g.to_vec();
                rope_rotate(&mut back, hd, positions, *base, true);
                add_into(d, &back);
            });
        }
        Op::FftConv { u, h } => {
            let (l, ch) = (node.shape[0], node.shape[1]);
            if nodes[u.0].requires_grad {
                let du = conv::fft_causal_corr_cols(g, v(*h), l, ch);
                acc(grads, nodes, *u, |d| add_into(d, &du));
            }
            if nodes[h.0].requires_grad {
                let dh = conv::fft_causal_corr_cols(g, v(*u), l, ch);
                acc(grads, nodes, *h, |d| add_into(d, &dh));
            }
        }
        Op::DepthwiseConv { x, k } => {
            let (l, ch) = (node.shape[0], node.shape[1]);
            let w = s(*k)[0];
            let (xv, kv) = (v(*x), v(*k));
            acc(grads, nodes, *x, |d| {
                for n in 0..l {
                    for j in 0..w.min(l - n) {
                        for c in 0..ch {
                            d[n * ch + c] += kv[j * ch + c] * g[(n + j) * ch + c];
                        }
                    }
                }
            });
            acc(grads, nodes, *k, |d| {
                for j in 0..w {
                    for n in j..l {
                        for c in 0..ch {
                            d[j * ch + c] += g[n * ch + c] * xv[(n - j) * ch + c];
                        }
                    }
                }
            });
        }
        Op::DecayWindow { alpha, bias, len } => {
            let ch = node.shape[1];
            let b = v(*bias)[0];
            let av = v(*alpha);
            let inv_len = F::one() / F::c(*len as f64);
            acc(grads, nodes, *alpha, |d| {
                for c in 0..ch {
                    let dsp = sigmoid(av[c]);
                    let mut sum = F::zero();
                    for n in 0..*len {
                        let t = F::c(n as f64) * inv_len;
                        let e = node.value[n * ch + c] - b;
                        sum += g[n * ch + c] * e * (-t);
                    }
                    d[c] += sum * dsp;
                }
            });
            acc(grads, nodes, *bias, |d| {
                d[0] += g.iter().copied().sum::<F>()
            });
        }
        Op::CrossEntropy { logits, targets } => {
            let n = s(*logits)[1];
            let m = targets.len();
            let scale = g[0] / F::c(m as f64);
            acc(grads, nodes, *logits, |d| {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..n {
                        let p = node.aux[r * n + j];
                        let onehot = if j == t { F::one() } else { F::zero() };
                        d[r * n + j] += (p - onehot) * scale;
                    }
                }
            });
        }
    }
}
