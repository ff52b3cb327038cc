//! Reverse-mode tape.
//!
//! Every differentiable op appends one node holding its output value and
//! enough bookkeeping to push an upstream gradient back to its inputs.
//! Nodes are only ever appended, so node order is a topological order and
//! a single reverse sweep visits each node once.

use super::linalg::{self, ConvGeometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    AddBias(Var, Var),
    Reduce {
        input: Var,
        map: Vec<usize>,
        divisor: f64,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Narrow {
        input: Var,
        outer: usize,
        src_width: usize,
        offset: usize,
        width: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        batch: usize,
        out_channels: usize,
    },
    LogSoftmax(Var),
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    PairwiseSqDist(Var),
    L2NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    Map {
        input: Var,
        derivative: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Hadamard(..) => "hadamard",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "add_scalar",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sqrt(_) => "sqrt",
            Op::AddBias(..) => "add_bias",
            Op::Reduce { .. } => "reduce",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Conv2d { .. } => "conv2d",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Gather { .. } => "gather",
            Op::PairwiseSqDist(_) => "pairwise_sqdist",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::Map { .. } => "map",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    /// Registers a tensor; it receives gradients iff `requires_grad()` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::scalar(0.0))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("forward {}", op.name()),
            });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension {
                op,
                lhs: other.to_vec(),
                rhs: vec![0, 0],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        linalg::gemm(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(op.name(), ta, tb)?;
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(t, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| f(x)).collect(),
        )?;
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Hadamard(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.unary(a, Op::Scale(a, alpha), |x| alpha * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Square root of a non-negative tensor. The derivative at exactly zero
    /// is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::contract("sqrt of a negative value"));
        }
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Var> {
        let derivative = self.value(a).data().iter().map(|&x| df(x)).collect();
        self.unary(
            a,
            Op::Map {
                input: a,
                derivative,
            },
            f,
        )
    }

    /// `x[..., n] + b[n]`, broadcasting `b` over all leading axes.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tb.len();
        if tb.rank() != 1 || tx.shape().last() != Some(&n) {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let bias = tb.data();
        let out = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.push(t, Op::AddBias(x, b), &[x, b])
    }

    fn reduce(&mut self, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank || reduced[axis] {
                return Err(Error::Axis {
                    op: if mean { "mean" } else { "sum" },
                    axis,
                    rank,
                });
            }
            reduced[axis] = true;
        }
        let out_shape: Vec<usize> = (0..rank)
            .filter(|&i| !reduced[i])
            .map(|i| shape[i])
            .collect();
        let count: usize = (0..rank)
            .filter(|&i| reduced[i])
            .map(|i| shape[i])
            .product();

        // Flat output index of each input element.
        let total: usize = shape.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let mut flat = 0;
            for i in 0..rank {
                if !reduced[i] {
                    flat = flat * shape[i] + idx[i];
                }
            }
            map.push(flat);
            for i in (0..rank).rev() {
                idx[i] += 1;
                if idx[i] < shape[i] {
                    break;
                }
                idx[i] = 0;
            }
        }

        let out_len: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_len];
        for (&o, &v) in map.iter().zip(self.value(x).data()) {
            out[o] += v;
        }
        let divisor = if mean { count as f64 } else { 1.0 };
        if mean {
            for v in &mut out {
                *v /= divisor;
            }
        }
        let t = Tensor::new(out_shape, out)?;
        self.push(
            t,
            Op::Reduce {
                input: x,
                map,
                divisor,
            },
            &[x],
        )
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(x, axes, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, &axes, false)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.value(x).rank()).collect();
        self.reduce(x, &axes, true)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::contract("concat needs at least one input"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut extent = 0;
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s[..axis] == base[..axis]
                && s[axis + 1..] == base[axis + 1..];
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            extent += s[axis];
            widths.push(s[axis] * inner);
        }
        let total_width: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total_width);
        for o in 0..outer {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = extent;
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
            inputs,
        )
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                op: "narrow",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension {
                op: "narrow",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src_width = shape[axis] * inner;
        let (offset, width) = (start * inner, len * inner);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * src_width + offset;
            out.extend_from_slice(&src[base..base + width]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, out)?;
        self.push(
            t,
            Op::Narrow {
                input: x,
                outer,
                src_width,
                offset,
                width,
            },
            &[x],
        )
    }

    /// Batched 2-D cross-correlation.
    ///
    /// `input` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin, kh, kw]`,
    /// `bias` (optional) is `[Cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (&[batch, cin, h, w], &[cout, wcin, kh, kw]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        };
        if cin != wcin
            || stride.0 == 0
            || stride.1 == 0
            || h + 2 * padding.0 < kh
            || w + 2 * padding.1 < kw
        {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::Dimension {
                    op: "conv2d",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeometry {
            channels: cin,
            height: h,
            width: w,
            kernel: (kh, kw),
            stride,
            padding,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let positions = ho * wo;
        let patch = geom.patch_len();
        let image_len = cin * h * w;
        let out_len = cout * positions;

        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let bvals = bias.map(|b| self.value(b).data());
        let mut cols = vec![0.0; patch * positions];
        let mut out = vec![0.0; batch * out_len];
        for n in 0..batch {
            linalg::im2col(&x[n * image_len..(n + 1) * image_len], &geom, &mut cols);
            let dst = &mut out[n * out_len..(n + 1) * out_len];
            linalg::gemm(wt, &cols, dst, cout, patch, positions);
            if let Some(bv) = bvals {
                for (co, &bc) in bv.iter().enumerate() {
                    for v in &mut dst[co * positions..(co + 1) * positions] {
                        *v += bc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, cout, ho, wo], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            t,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                out_channels: cout,
            },
            &inputs,
        )
    }

    /// Row-wise log-softmax of a `[B, N]` matrix, stabilised by the row max.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("log_softmax", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    /// Picks flat elements of `x` into a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if indices.is_empty() {
            return Err(Error::contract("gather needs at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Dimension {
                op: "gather",
                lhs: src.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let out: Vec<f64> = indices.iter().map(|&i| src.data()[i]).collect();
        let t = Tensor::from_vec(out);
        self.push(
            t,
            Op::Gather {
                input: x,
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    /// `[B, d]` rows → `[B, B]` squared Euclidean distances.
    pub fn pairwise_sqdist(&mut self, x: Var) -> Result<Var> {
        let (b, d) = self.matrix_dims("pairwise_sqdist", x)?;
        let e = self.value(x).data();
        let mut out = vec![0.0; b * b];
        for i in 0..b {
            for j in (i + 1)..b {
                let dist: f64 = e[i * d..(i + 1) * d]
                    .iter()
                    .zip(&e[j * d..(j + 1) * d])
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                out[i * b + j] = dist;
                out[j * b + i] = dist;
            }
        }
        let t = Tensor::new(vec![b, b], out)?;
        self.push(t, Op::PairwiseSqDist(x), &[x])
    }

    /// Scales each row of a `[B, d]` matrix to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (b, d) = self.matrix_dims("l2_normalize_rows", x)?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(b);
        let mut out = vec![0.0; b * d];
        for r in 0..b {
            let row = &src[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let t = Tensor::new(vec![b, d], out)?;
        self.push(t, Op::L2NormalizeRows { input: x, norms }, &[x])
    }

    /// Reverse sweep from a scalar `loss`; accumulates into every leaf that
    /// requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].value;
        if root.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite {
                        context: format!("gradient of node {i}"),
                    });
                }
                let node = &mut self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.needs_grad {
                    node.value.accumulate_grad(&g)?;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let da = slot(grads, *a, m * k);
                    linalg::gemm_nt(g, self.value(*b).data(), da, m, n, k);
                }
                if self.wants(*b) {
                    let db = slot(grads, *b, k * n);
                    linalg::gemm_tn(self.value(*a).data(), g, db, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let da = slot(grads, *a, m * n);
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] += g[c * m + r];
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if self.wants(*a) {
                    for (d, &gv) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.wants(*b) {
                    for (d, &gv) in slot(grads, *b, g.len()).iter_mut().zip(g) {
                        *d += sign * gv;
                    }
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let da = slot(grads, *a, g.len());
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let db = slot(grads, *b, g.len());
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(a, alpha) => {
                for (d, &gv) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += alpha * gv;
                }
            }
            Op::Shift(a) | Op::Reshape(a) => {
                for (d, &gv) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Sigmoid(a) => {
                for ((d, &gv), &y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(out) {
                    *d += gv * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                for ((d, &gv), &y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(out) {
                    *d += gv * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                for ((d, &gv), &y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(out) {
                    if y > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Sqrt(a) => {
                for ((d, &gv), &y) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(out) {
                    if y > 0.0 {
                        *d += gv * 0.5 / y;
                    }
                }
            }
            Op::Map { input, derivative } => {
                for ((d, &gv), &dy) in slot(grads, *input, g.len())
                    .iter_mut()
                    .zip(g)
                    .zip(derivative)
                {
                    *d += gv * dy;
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    for (d, &gv) in slot(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.wants(*b) {
                    let n = len_of(*b);
                    let db = slot(grads, *b, n);
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                }
            }
            Op::Reduce {
                input,
                map,
                divisor,
            } => {
                let dx = slot(grads, *input, map.len());
                for (d, &o) in dx.iter_mut().zip(map) {
                    *d += g[o] / divisor;
                }
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in inputs.iter().zip(widths) {
                    if self.wants(v) {
                        let dv = slot(grads, v, outer * w);
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            for (d, &gv) in dv[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Narrow {
                input,
                outer,
                src_width,
                offset,
                width,
            } => {
                let dx = slot(grads, *input, outer * src_width);
                for o in 0..*outer {
                    let base = o * src_width + offset;
                    for (d, &gv) in dx[base..base + width]
                        .iter_mut()
                        .zip(&g[o * width..(o + 1) * width])
                    {
                        *d += gv;
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                batch,
                out_channels,
            } => {
                let positions = geom.out_height() * geom.out_width();
                let patch = geom.patch_len();
                let image_len = geom.channels * geom.height * geom.width;
                let out_len = out_channels * positions;
                let x = self.value(*input).data();
                let wt = self.value(*weight).data();
                let want_x = self.wants(*input);
                let want_w = self.wants(*weight);
                let mut cols = vec![0.0; patch * positions];
                let mut dcols = vec![0.0; patch * positions];
                let mut dw = want_w.then(|| vec![0.0; out_channels * patch]);
                let mut dx = want_x.then(|| vec![0.0; batch * image_len]);
                for n in 0..*batch {
                    let gn = &g[n * out_len..(n + 1) * out_len];
                    if let Some(dw) = dw.as_mut() {
                        linalg::im2col(&x[n * image_len..(n + 1) * image_len], geom, &mut cols);
                        linalg::gemm_nt(gn, &cols, dw, *out_channels, positions, patch);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        linalg::gemm_tn(wt, gn, &mut dcols, *out_channels, patch, positions);
                        linalg::col2im(&dcols, geom, &mut dx[n * image_len..(n + 1) * image_len]);
                    }
                }
                if let Some(dw) = dw {
                    for (d, v) in slot(grads, *weight, dw.len()).iter_mut().zip(dw) {
                        *d += v;
                    }
                }
                if let Some(dx) = dx {
                    for (d, v) in slot(grads, *input, dx.len()).iter_mut().zip(dx) {
                        *d += v;
                    }
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let db = slot(grads, b, *out_channels);
                    for n in 0..*batch {
                        for (co, d) in db.iter_mut().enumerate() {
                            let base = n * out_len + co * positions;
                            *d += g[base..base + positions].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let cols = self.shape(*x)[1];
                let dx = slot(grads, *x, g.len());
                for (r, (grow, yrow)) in g.chunks(cols).zip(out.chunks(cols)).enumerate() {
                    let total: f64 = grow.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] += grow[c] - yrow[c].exp() * total;
                    }
                }
            }
            Op::Gather { input, indices } => {
                let dx = slot(grads, *input, len_of(*input));
                for (&idx, &gv) in indices.iter().zip(g) {
                    dx[idx] += gv;
                }
            }
            Op::PairwiseSqDist(x) => {
                let (b, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let e = self.value(*x).data();
                let dx = slot(grads, *x, b * d);
                for i in 0..b {
                    for j in 0..b {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g[i * b + j] + g[j * b + i]);
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            dx[i * d + k] += w * (e[i * d + k] - e[j * d + k]);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { input, norms } => {
                let d = self.shape(*input)[1];
                let dx = slot(grads, *input, g.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let y = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        dx[r * d + k] += (gr[k] - y[k] * dot) / norm;
                    }
                }
            }
        }
    }
}
