//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op evaluates eagerly, records its inputs on the tape and checks that
//! the result is finite. [`Graph::backward`] walks the tape in reverse from a
//! scalar node; gradients of intermediate nodes remain queryable afterwards.

use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::params::ParamStore;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Padding, dilation and grouping of a stride-1 convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub groups: usize,
    pub dilation: Vec<usize>,
    pub padding: Vec<usize>,
}

impl ConvSpec {
    /// "Same" padding for odd kernels: output spatial shape equals input.
    pub fn same(kernel: &[usize], dilation: &[usize], groups: usize) -> Result<Self> {
        if kernel.len() != dilation.len() {
            return Err(Error::shape("conv", "kernel/dilation rank differ"));
        }
        if let Some(k) = kernel.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::invalid(format!("same padding needs odd kernels, got {k}")));
        }
        Ok(Self {
            groups,
            dilation: dilation.to_vec(),
            padding: kernel
                .iter()
                .zip(dilation)
                .map(|(k, d)| d * (k - 1) / 2)
                .collect(),
        })
    }

    /// No padding, unit dilation.
    pub fn valid(rank: usize, groups: usize) -> Self {
        Self {
            groups,
            dilation: vec![1; rank],
            padding: vec![0; rank],
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var),
    LayerNorm(Var),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    VarAxis(Var, usize),
    MatMul(Var, Var),
    Conv(Var, Var, ConvGeom),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Permute(Var, Vec<usize>),
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) | Conv(a, b, _) => {
                vec![*a, *b]
            }
            Scale(a, _) | Offset(a) | Relu(a) | Sigmoid(a) | Tanh(a) | Exp(a) | Log(a)
            | Softmax(a) | LayerNorm(a) | Sum(a) | Mean(a) | Variance(a) | SumAxis(a, _)
            | MeanAxis(a, _) | VarAxis(a, _) | Slice(a, _, _) | Permute(a, _) | Reshape(a) => {
                vec![*a]
            }
            Concat(vs, _) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Per-op saved state (layer-norm inverse std).
    cache: Vec<f64>,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Splits a shape around `axis` into (outer, len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
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

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            cache: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// A value the loss is not differentiated against.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// A differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Differentiable leaf for parameter `name`, created on first use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.variable(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter nodes registered so far.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn shape_err(&self, op: &'static str, detail: impl Into<String>) -> Error {
        Error::Shape {
            op,
            node: self.nodes.len(),
            detail: detail.into(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        self.push_cached(op, value, Vec::new(), name)
    }

    fn push_cached(
        &mut self,
        op: Op,
        value: Tensor,
        cache: Vec<f64>,
        name: &'static str,
    ) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: name,
                node: self.nodes.len(),
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            cache,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- elementwise -----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = kernels::broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            self.shape_err(name, format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape()))
        })?;
        let mut data = vec![0.0; numel(&out)];
        let (da, db) = (ta.data(), tb.data());
        kernels::for_each_broadcast(ta.shape(), tb.shape(), &out, |o, i, j| {
            data[o] = f(da[i], db[j]);
        });
        self.push(op, Tensor::from_parts(out, data), name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `c · a`
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), v, "scale")
    }

    /// `a + c`
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::Offset(a), v, "offset")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), v, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v, "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), v, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(Op::Log(a), v, "log")
    }

    // ----- row ops over the last axis -----

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| self.shape_err("softmax", "rank-0 input"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x /= total;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Op::Softmax(a), Tensor::from_parts(shape, out), "softmax")
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| self.shape_err("layer_norm", "rank-0 input"))?;
        let mut out = t.data().to_vec();
        let mut inv = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * s;
            }
            inv.push(s);
        }
        let shape = t.shape().to_vec();
        self.push_cached(Op::LayerNorm(a), Tensor::from_parts(shape, out), inv, "layer_norm")
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).mean();
        self.push(Op::Mean(a), Tensor::scalar(s), "mean")
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.mean();
        let v = t.data().iter().map(|x| (x - m) * (x - m)).sum::<f64>() / t.len() as f64;
        self.push(Op::Variance(a), Tensor::scalar(v), "variance")
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(self.shape_err(op, format!("axis {axis} of {:?}", self.shape(a))));
        }
        Ok(())
    }

    fn reduce_axis(&self, a: Var, axis: usize, f: impl Fn(&[f64]) -> f64) -> Tensor {
        let t = self.value(a);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = t.data()[(o * len + k) * inner + i];
                }
                out[o * inner + i] = f(&buf);
            }
        }
        Tensor::from_parts(without_axis(t.shape(), axis), out)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "sum_axis")?;
        let v = self.reduce_axis(a, axis, |xs| xs.iter().sum());
        self.push(Op::SumAxis(a, axis), v, "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "mean_axis")?;
        let v = self.reduce_axis(a, axis, |xs| xs.iter().sum::<f64>() / xs.len() as f64);
        self.push(Op::MeanAxis(a, axis), v, "mean_axis")
    }

    /// Population variance along `axis`.
    pub fn var_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "var_axis")?;
        let v = self.reduce_axis(a, axis, |xs| {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
        });
        self.push(Op::VarAxis(a, axis), v, "var_axis")
    }

    // ----- linear algebra -----

    /// `[.., m, k] × [k, n]` or batched `[.., m, k] × [.., k, n]` with equal batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.shape_err("matmul", format!("{sa:?} x {sb:?}: need rank >= 2")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batched_b = sb.len() > 2;
        if k != k2 || (batched_b && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(self.shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![0.0; batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let bo = if batched_b { bi * k * n } else { 0 };
            kernels::gemm_nn(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.push(Op::MatMul(a, b), Tensor::from_parts(shape, out), "matmul")
    }

    /// Stride-1 convolution. `x: [B, Cin, *spatial]`, `w: [Cout, Cin/groups, *kernel]`,
    /// with one to three spatial axes. No bias.
    pub fn conv(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let r = sx.len().wrapping_sub(2);
        if !(1..=3).contains(&r) || sw.len() != sx.len() {
            return Err(self.shape_err("conv", format!("input {sx:?}, weight {sw:?}")));
        }
        if spec.dilation.len() != r || spec.padding.len() != r {
            return Err(self.shape_err("conv", "spec rank differs from spatial rank"));
        }
        let (cin, cout, g) = (sx[1], sw[0], spec.groups);
        if g == 0 || cin % g != 0 || cout % g != 0 || sw[1] != cin / g {
            return Err(self.shape_err(
                "conv",
                format!("channels: input {cin}, weight {sw:?}, groups {g}"),
            ));
        }
        let pad3 = |v: &[usize], fill: usize| {
            let mut a = [fill; 3];
            a[3 - r..].copy_from_slice(v);
            a
        };
        let input = pad3(&sx[2..], 1);
        let kernel = pad3(&sw[2..], 1);
        let dilation = pad3(&spec.dilation, 1);
        let padding = pad3(&spec.padding, 0);
        let mut output = [0usize; 3];
        for i in 0..3 {
            let span = dilation[i] * (kernel[i] - 1) + 1;
            let padded = input[i] + 2 * padding[i];
            if span > padded {
                return Err(self.shape_err(
                    "conv",
                    format!("kernel extent {span} exceeds padded input {padded}"),
                ));
            }
            output[i] = padded - span + 1;
        }
        let geom = ConvGeom {
            batch: sx[0],
            cin,
            cout,
            groups: g,
            input,
            kernel,
            dilation,
            padding,
            output,
        };
        let mut out = vec![0.0; sx[0] * cout * output.iter().product::<usize>()];
        kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data(), &mut out);
        let mut shape = vec![sx[0], cout];
        shape.extend_from_slice(&output[3 - r..]);
        self.push(Op::Conv(x, w, geom), Tensor::from_parts(shape, out), "conv")
    }

    // ----- structure -----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| self.shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(self.shape_err("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(self.shape_err("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Op::Concat(parts.to_vec(), axis), Tensor::from_parts(shape, out), "concat")
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(self.shape_err("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        self.push(Op::Slice(a, axis, start), Tensor::from_parts(shape, out), "slice")
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(self.shape_err("permute", format!("{perm:?} for {s:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_data(self.value(a).data(), &s, perm);
        self.push(Op::Permute(a, perm.to_vec()), Tensor::from_parts(out_shape, out), "permute")
    }

    pub fn transpose(&mut self, a: Var, i: usize, j: usize) -> Result<Var> {
        let mut perm: Vec<usize> = (0..self.shape(a).len()).collect();
        if i >= perm.len() || j >= perm.len() {
            return Err(self.shape_err("transpose", format!("axes {i},{j} of {:?}", self.shape(a))));
        }
        perm.swap(i, j);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if numel(shape) != t.len() {
            return Err(self.shape_err("reshape", format!("{:?} -> {shape:?}", t.shape())));
        }
        let v = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push(Op::Reshape(a), v, "reshape")
    }

    // ----- backward -----

    /// Reverse-mode gradients of scalar node `loss` with respect to every
    /// differentiable node reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                node: loss.0,
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop_node(i, &dy, &mut grads);
            }
            grads[i] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| g.map(|d| Tensor::from_parts(node.value.shape().to_vec(), d)))
            .collect();
        Ok(Grads { grads })
    }

    fn backprop_node(&self, i: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        // Accumulates into input `v` via `f(grad_buffer)`, skipping constants.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let inp = &self.nodes[v.0];
            if !inp.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; inp.value.len()]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        use Op::*;
        match &node.op {
            Leaf => {}
            Add(a, b) | Sub(a, b) => {
                let sign = if matches!(node.op, Sub(..)) { -1.0 } else { 1.0 };
                let out = node.value.shape();
                acc(*a, &mut |g| {
                    kernels::for_each_broadcast(shp(*a), shp(*b), out, |o, ia, _| g[ia] += dy[o])
                });
                acc(*b, &mut |g| {
                    kernels::for_each_broadcast(shp(*a), shp(*b), out, |o, _, ib| {
                        g[ib] += sign * dy[o]
                    })
                });
            }
            Mul(a, b) => {
                let out = node.value.shape();
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    kernels::for_each_broadcast(shp(*a), shp(*b), out, |o, ia, ib| {
                        g[ia] += dy[o] * vb[ib]
                    })
                });
                acc(*b, &mut |g| {
                    kernels::for_each_broadcast(shp(*a), shp(*b), out, |o, ia, ib| {
                        g[ib] += dy[o] * va[ia]
                    })
                });
            }
            Div(a, b) => {
                let out = node.value.shape();
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    kernels::for_each_broadcast(shp(*a), shp(*b), out, |o, ia, ib| {
                        g[ia] += dy[o] / vb[ib]
                    })
                });
                acc(*b, &mut |g| {
                    kernels::for_each_broadcast(shp(*a), shp(*b), out, |o, ia, ib| {
                        g[ib] -= dy[o] * va[ia] / (vb[ib] * vb[ib])
                    })
                });
            }
            Scale(a, c) => acc(*a, &mut |g| {
                for (gi, d) in g.iter_mut().zip(dy) {
                    *gi += c * d;
                }
            }),
            Offset(a) | Reshape(a) => acc(*a, &mut |g| {
                for (gi, d) in g.iter_mut().zip(dy) {
                    *gi += d;
                }
            }),
            Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        if x[k] > 0.0 {
                            g[k] += dy[k];
                        }
                    }
                })
            }
            Sigmoid(a) => acc(*a, &mut |g| {
                for k in 0..g.len() {
                    g[k] += dy[k] * y[k] * (1.0 - y[k]);
                }
            }),
            Tanh(a) => acc(*a, &mut |g| {
                for k in 0..g.len() {
                    g[k] += dy[k] * (1.0 - y[k] * y[k]);
                }
            }),
            Exp(a) => acc(*a, &mut |g| {
                for k in 0..g.len() {
                    g[k] += dy[k] * y[k];
                }
            }),
            Log(a) => {
                let x = val(*a);
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += dy[k] / x[k];
                    }
                })
            }
            Softmax(a) => {
                let n = *node.value.shape().last().unwrap();
                acc(*a, &mut |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                        for k in 0..n {
                            gr[k] += yr[k] * (dr[k] - dot);
                        }
                    }
                })
            }
            LayerNorm(a) => {
                let n = *node.value.shape().last().unwrap();
                let inv = &node.cache;
                acc(*a, &mut |g| {
                    for (r, ((gr, yr), dr)) in
                        g.chunks_mut(n).zip(y.chunks(n)).zip(dy.chunks(n)).enumerate()
                    {
                        let md = dr.iter().sum::<f64>() / n as f64;
                        let mdy = dr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for k in 0..n {
                            gr[k] += inv[r] * (dr[k] - md - yr[k] * mdy);
                        }
                    }
                })
            }
            Sum(a) => acc(*a, &mut |g| {
                for gi in g.iter_mut() {
                    *gi += dy[0];
                }
            }),
            Mean(a) => acc(*a, &mut |g| {
                let s = dy[0] / g.len() as f64;
                for gi in g.iter_mut() {
                    *gi += s;
                }
            }),
            Variance(a) => {
                let x = val(*a);
                let n = x.len() as f64;
                let m = x.iter().sum::<f64>() / n;
                acc(*a, &mut |g| {
                    for k in 0..g.len() {
                        g[k] += dy[0] * 2.0 * (x[k] - m) / n;
                    }
                })
            }
            SumAxis(a, axis) | MeanAxis(a, axis) | VarAxis(a, axis) => {
                let (outer, len, inner) = split_axis(shp(*a), *axis);
                let x = val(*a);
                let kind = &node.op;
                acc(*a, &mut |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let d = dy[o * inner + i];
                            match kind {
                                SumAxis(..) => {
                                    for k in 0..len {
                                        g[(o * len + k) * inner + i] += d;
                                    }
                                }
                                MeanAxis(..) => {
                                    for k in 0..len {
                                        g[(o * len + k) * inner + i] += d / len as f64;
                                    }
                                }
                                _ => {
                                    let m = (0..len)
                                        .map(|k| x[(o * len + k) * inner + i])
                                        .sum::<f64>()
                                        / len as f64;
                                    for k in 0..len {
                                        let idx = (o * len + k) * inner + i;
                                        g[idx] += d * 2.0 * (x[idx] - m) / len as f64;
                                    }
                                }
                            }
                        }
                    }
                })
            }
            MatMul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = numel(&sa[..sa.len() - 2]);
                let batched_b = sb.len() > 2;
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for bi in 0..batch {
                        let bo = if batched_b { bi * k * n } else { 0 };
                        kernels::gemm_nt(
                            &dy[bi * m * n..(bi + 1) * m * n],
                            &vb[bo..bo + k * n],
                            &mut g[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for bi in 0..batch {
                        let bo = if batched_b { bi * k * n } else { 0 };
                        kernels::gemm_tn(
                            &va[bi * m * k..(bi + 1) * m * k],
                            &dy[bi * m * n..(bi + 1) * m * n],
                            &mut g[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Conv(x, w, geom) => {
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |g| kernels::conv_backward_input(geom, dy, vw, g));
                acc(*w, &mut |g| kernels::conv_backward_weight(geom, dy, vx, g));
            }
            Concat(parts, axis) => {
                let out = node.value.shape();
                let (outer, total, inner) = split_axis(out, *axis);
                let mut start = 0;
                for &p in parts {
                    let len = shp(p)[*axis];
                    acc(p, &mut |g| {
                        for o in 0..outer {
                            let src = &dy[(o * total + start) * inner..(o * total + start + len) * inner];
                            let dst = &mut g[o * len * inner..(o + 1) * len * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    start += len;
                }
            }
            Slice(a, axis, start) => {
                let (outer, len, inner) = split_axis(shp(*a), *axis);
                let width = node.value.shape()[*axis];
                acc(*a, &mut |g| {
                    for o in 0..outer {
                        let dst = &mut g[(o * len + start) * inner..(o * len + start + width) * inner];
                        let src = &dy[o * width * inner..(o + 1) * width * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                })
            }
            Permute(a, perm) => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(dy, node.value.shape(), &inverse);
                acc(*a, &mut |g| {
                    for (gi, b) in g.iter_mut().zip(&back) {
                        *gi += b;
                    }
                })
            }
        }
    }

    /// Gradients for every parameter in `store`, zero where the loss does not depend on it.
    pub fn param_grads(&self, grads: &Grads, store: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in store.iter() {
            let g = self
                .params
                .get(name)
                .and_then(|&v| grads.get(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name, g);
        }
        out
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = super::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if out_shape.is_empty() {
        out.extend_from_slice(data);
        return out;
    }
    let rank = out_shape.len();
    let mut counter = vec![0usize; rank];
    let mut src = 0usize;
    let inner = out_shape[rank - 1];
    let step = src_strides[rank - 1];
    while out.len() < total {
        let mut s = src;
        for _ in 0..inner {
            out.push(data[s]);
            s += step;
        }
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            counter[axis] += 1;
            src += src_strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            src -= src_strides[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
    out
}
