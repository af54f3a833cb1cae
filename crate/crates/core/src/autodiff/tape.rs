//! Define-by-run reverse-mode tape.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! owning [`Tape`]. [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints. Nodes that do not depend on any leaf variable or
//! parameter are skipped during the backward sweep.

use std::cell::{Ref, RefCell};

use crate::autodiff::params::{ParamId, ParamStore};
use crate::error::{OtcError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize, Option<Vec<bool>>),
    LogSumExp(usize, Option<Vec<bool>>),
    L2Normalize(usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    StackRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    SliceCols(usize, usize),
    Sum(usize),
    Element(usize, usize),
    CumProd(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &*self.value())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    /// Differentiable leaf; its adjoint is available from [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; [`Gradients::accumulate_into`]
    /// adds its adjoint to the store.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(OtcError::Dimension {
                op: "backward",
                left: nodes[loss.id].value.shape().to_vec(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(pid) => Some((pid, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = var.value().shape().to_vec();
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                for (acc, v) in store.grad_mut(pid).iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], target: usize, contrib: Vec<f64>) {
    if !nodes[target].needs_grad {
        return;
    }
    match &mut grads[target] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn accumulate_with(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    target: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[target].needs_grad {
        return;
    }
    let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
    f(slot);
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Constant | Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = av.dims2();
            let (_, n) = bv.dims2();
            let (ad, bd) = (av.data(), bv.data());
            accumulate_with(nodes, grads, *a, |ga| {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            });
            accumulate_with(nodes, grads, *b, |gb| {
                for i in 0..m {
                    for p in 0..k {
                        let aip = ad[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let row = &g[i * n..(i + 1) * n];
                        for (dst, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(row) {
                            *dst += aip * gv;
                        }
                    }
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::AddBias(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            let n = nodes[*b].value.len();
            accumulate_with(nodes, grads, *b, |gb| {
                for row in g.chunks(n) {
                    for (dst, v) in gb.iter_mut().zip(row) {
                        *dst += v;
                    }
                }
            });
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
            accumulate(nodes, grads, *a, g.iter().zip(bd).map(|(g, b)| g * b).collect());
            accumulate(nodes, grads, *b, g.iter().zip(ad).map(|(g, a)| g * a).collect());
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.iter().map(|v| v * c).collect()),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Tanh(a) => {
            let d = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y));
            accumulate(nodes, grads, *a, d.collect());
        }
        Op::Relu(a) => {
            let x = nodes[*a].value.data();
            let d = g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 });
            accumulate(nodes, grads, *a, d.collect());
        }
        Op::Sigmoid(a) => {
            let d = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y));
            accumulate(nodes, grads, *a, d.collect());
        }
        Op::Exp(a) => {
            let d = g.iter().zip(out.data()).map(|(g, y)| g * y);
            accumulate(nodes, grads, *a, d.collect());
        }
        Op::Log(a) => {
            let x = nodes[*a].value.data();
            accumulate(nodes, grads, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
        }
        Op::Softmax(a, mask) => {
            let (rows, cols) = out.dims2();
            let y = out.data();
            let mut d = vec![0.0; y.len()];
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let dot: f64 = g[span.clone()].iter().zip(&y[span.clone()]).map(|(g, y)| g * y).sum();
                for i in span {
                    if mask.as_ref().is_none_or(|m| m[i]) {
                        d[i] = y[i] * (g[i] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::LogSumExp(a, mask) => {
            let x = &nodes[*a].value;
            let (rows, cols) = x.dims2();
            let xd = x.data();
            let mut d = vec![0.0; xd.len()];
            for r in 0..rows {
                let lse = out.data()[r];
                if !lse.is_finite() {
                    continue;
                }
                for i in r * cols..(r + 1) * cols {
                    if mask.as_ref().is_none_or(|m| m[i]) {
                        d[i] = g[r] * (xd[i] - lse).exp();
                    }
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::L2Normalize(a) => {
            let norm = nodes[*a].value.norm();
            let y = out.data();
            let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
            let d = g.iter().zip(y).map(|(g, y)| (g - y * dot) / norm);
            accumulate(nodes, grads, *a, d.collect());
        }
        Op::Transpose(a) => {
            let (r, c) = out.dims2();
            let mut d = vec![0.0; g.len()];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = g[i * c + j];
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = out.dims2();
            let mut offset = 0;
            for &p in parts {
                let (_, c) = nodes[p].value.dims2();
                accumulate_with(nodes, grads, p, |gp| {
                    for r in 0..rows {
                        for j in 0..c {
                            gp[r * c + j] += g[r * total + offset + j];
                        }
                    }
                });
                offset += c;
            }
        }
        Op::StackRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.len();
                accumulate(nodes, grads, p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::GatherRows(a, idx) => {
            let (_, cols) = out.dims2();
            accumulate_with(nodes, grads, *a, |ga| {
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..cols {
                        ga[r * cols + j] += g[k * cols + j];
                    }
                }
            });
        }
        Op::SliceCols(a, start) => {
            let (rows, width) = out.dims2();
            let (_, cols) = nodes[*a].value.dims2();
            accumulate_with(nodes, grads, *a, |ga| {
                for r in 0..rows {
                    for j in 0..width {
                        ga[r * cols + start + j] += g[r * width + j];
                    }
                }
            });
        }
        Op::Sum(a) => {
            let n = nodes[*a].value.len();
            accumulate(nodes, grads, *a, vec![g[0]; n]);
        }
        Op::Element(a, i) => {
            let i = *i;
            accumulate_with(nodes, grads, *a, |ga| ga[i] += g[0]);
        }
        Op::CumProd(a) => {
            let x = nodes[*a].value.data();
            let (rows, cols) = out.dims2();
            let mut d = vec![0.0; x.len()];
            for r in 0..rows {
                let xr = &x[r * cols..(r + 1) * cols];
                for s in 0..cols {
                    // d y_t / d x_s = prod_{u <= t, u != s} x_u
                    let mut prefix: f64 = xr[..s].iter().product();
                    let mut acc = 0.0;
                    for t in s..cols {
                        if t > s {
                            prefix *= xr[t];
                        }
                        acc += g[r * cols + t] * prefix;
                    }
                    d[r * cols + s] = acc;
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let xv = &nodes[*x].value;
            let (rows, cols) = xv.dims2();
            let gamma = nodes[*gain].value.data();
            let mut dx = vec![0.0; xv.len()];
            let mut dgain = vec![0.0; cols];
            let mut dbias = vec![0.0; cols];
            for r in 0..rows {
                let row = xv.row(r);
                let (mean, inv_std) = row_moments(row, *eps);
                let gr = &g[r * cols..(r + 1) * cols];
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
                let dxhat: Vec<f64> = gr.iter().zip(gamma).map(|(g, w)| g * w).collect();
                let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                for j in 0..cols {
                    dx[r * cols + j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gain, dgain);
            accumulate(nodes, grads, *bias, dbias);
        }
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_mask(mask: Option<&[bool]>, shape: &[usize]) -> Result<()> {
    if let Some(m) = mask {
        let n: usize = shape.iter().product();
        if m.len() != n {
            return Err(OtcError::Dimension {
                op: "mask",
                left: shape.to_vec(),
                right: vec![m.len()],
            });
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn dims2(&self) -> (usize, usize) {
        self.value().dims2()
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Tensor) -> Var<'t> {
        let v = f(&self.value());
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(v, op, needs)
    }

    fn map(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        self.unary(op, |t| {
            Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        })
    }

    fn binary_same_shape(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let v = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(OtcError::Dimension {
                    op: name,
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(v, op, needs))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = {
            let (a, b) = (self.value(), other.value());
            let (m, k) = a.dims2();
            let (k2, n) = b.dims2();
            if k != k2 {
                return Err(OtcError::Dimension {
                    op: "matmul",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = ad[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for (o, bv) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                        *o += aip * bv;
                    }
                }
            }
            Tensor::from_parts(vec![m, n], out)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id), needs))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_same_shape(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Adds a length-`n` bias to every row of an `m×n` value.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let v = {
            let (a, b) = (self.value(), bias.value());
            let (_, n) = a.dims2();
            if b.len() != n {
                return Err(OtcError::Dimension {
                    op: "add_bias",
                    left: a.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let data = a
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
                .collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let needs = self.tape.needs(&[self.id, bias.id]);
        Ok(self.tape.push(v, Op::AddBias(self.id, bias.id), needs))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(Op::Scale(self.id, c), |v| v * c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.map(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn tanh(self) -> Var<'t> {
        self.map(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(self) -> Var<'t> {
        self.map(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(Op::Sigmoid(self.id), stable_sigmoid)
    }

    pub fn exp(self) -> Var<'t> {
        self.map(Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if let Some(bad) = self.value().data().iter().find(|v| **v <= 0.0 || v.is_nan()) {
            return Err(OtcError::Domain(format!("log of non-positive value {bad}")));
        }
        Ok(self.map(Op::Log(self.id), f64::ln))
    }

    /// Row-wise softmax. Masked entries (`false`) are exactly zero.
    pub fn softmax(self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            check_mask(mask, x.shape())?;
            let (rows, cols) = x.dims2();
            let mut out = vec![0.0; x.len()];
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let keep = |i: usize| mask.is_none_or(|m| m[i]);
                let max = span
                    .clone()
                    .filter(|&i| keep(i))
                    .map(|i| x.data()[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(OtcError::InvalidMask(format!("row {r} is fully masked")));
                }
                let mut total = 0.0;
                for i in span.clone().filter(|&i| keep(i)) {
                    out[i] = (x.data()[i] - max).exp();
                    total += out[i];
                }
                for o in &mut out[span] {
                    *o /= total;
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(v, Op::Softmax(self.id, mask.map(<[bool]>::to_vec)), needs))
    }

    /// Row-wise masked log-sum-exp, shape `rows×1`. A fully masked row
    /// yields `-inf` and passes no gradient.
    pub fn logsumexp(self, mask: Option<&[bool]>) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            check_mask(mask, x.shape())?;
            let (rows, cols) = x.dims2();
            let mut out = vec![f64::NEG_INFINITY; rows];
            for (r, o) in out.iter_mut().enumerate() {
                let vals: Vec<f64> = (r * cols..(r + 1) * cols)
                    .filter(|&i| mask.is_none_or(|m| m[i]))
                    .map(|i| x.data()[i])
                    .collect();
                let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max.is_finite() {
                    *o = max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                }
            }
            Tensor::from_parts(vec![rows, 1], out)
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self
            .tape
            .push(v, Op::LogSumExp(self.id, mask.map(<[bool]>::to_vec)), needs))
    }

    /// Scales the whole value to unit Euclidean norm.
    pub fn l2_normalize(self) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            let norm = x.norm();
            if norm <= f64::MIN_POSITIVE || !norm.is_finite() {
                return Err(OtcError::DegenerateInput(format!(
                    "cannot normalize vector with norm {norm}"
                )));
            }
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v / norm).collect())
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(v, Op::L2Normalize(self.id), needs))
    }

    pub fn transpose(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), |x| {
            let (r, c) = x.dims2();
            let mut out = vec![0.0; x.len()];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::from_parts(vec![c, r], out)
        })
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            let (rows, cols) = x.dims2();
            if idx.is_empty() {
                return Err(OtcError::Dimension {
                    op: "gather_rows",
                    left: x.shape().to_vec(),
                    right: vec![0],
                });
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
                return Err(OtcError::Bounds {
                    index: bad,
                    len: rows,
                });
            }
            let data = idx.iter().flat_map(|&r| x.row(r).to_vec()).collect();
            Tensor::from_parts(vec![idx.len(), cols], data)
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(v, Op::GatherRows(self.id, idx.to_vec()), needs))
    }

    pub fn row(self, r: usize) -> Result<Var<'t>> {
        self.gather_rows(&[r])
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            let (rows, cols) = x.dims2();
            if width == 0 || start + width > cols {
                return Err(OtcError::Dimension {
                    op: "slice_cols",
                    left: x.shape().to_vec(),
                    right: vec![start, width],
                });
            }
            let data = (0..rows)
                .flat_map(|r| x.row(r)[start..start + width].to_vec())
                .collect();
            Tensor::from_parts(vec![rows, width], data)
        };
        let needs = self.tape.needs(&[self.id]);
        Ok(self.tape.push(v, Op::SliceCols(self.id, start), needs))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |x| Tensor::scalar(x.data().iter().sum()))
    }

    /// Flat-indexed element as a one-element value.
    pub fn element(self, i: usize) -> Result<Var<'t>> {
        let len = self.value().len();
        if i >= len {
            return Err(OtcError::Bounds { index: i, len });
        }
        Ok(self.unary(Op::Element(self.id, i), |x| Tensor::scalar(x.data()[i])))
    }

    /// Cumulative product along each row.
    pub fn cumprod(self) -> Var<'t> {
        self.unary(Op::CumProd(self.id), |x| {
            let (_, cols) = x.dims2();
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(cols) {
                for j in 1..row.len() {
                    row[j] *= row[j - 1];
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        })
    }

    /// Per-row normalization to zero mean and unit variance, followed by an
    /// elementwise gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let v = {
            let x = self.value();
            let (_, cols) = x.dims2();
            let (g, b) = (gain.value(), bias.value());
            if g.len() != cols || b.len() != cols {
                return Err(OtcError::Dimension {
                    op: "layer_norm",
                    left: x.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(cols) {
                let (mean, inv_std) = row_moments(row, eps);
                for j in 0..cols {
                    out.push((row[j] - mean) * inv_std * g.data()[j] + b.data()[j]);
                }
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        };
        let needs = self.tape.needs(&[self.id, gain.id, bias.id]);
        Ok(self.tape.push(
            v,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                eps,
            },
            needs,
        ))
    }
}

/// Horizontal concatenation of values with equal row counts.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| OtcError::Dimension {
        op: "concat_cols",
        left: vec![],
        right: vec![],
    })?;
    let tape = first.tape;
    let v = {
        let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].dims2().0;
        if let Some(bad) = vals.iter().find(|v| v.dims2().0 != rows) {
            return Err(OtcError::Dimension {
                op: "concat_cols",
                left: vals[0].shape().to_vec(),
                right: bad.shape().to_vec(),
            });
        }
        let total: usize = vals.iter().map(|v| v.dims2().1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row(r));
            }
        }
        Tensor::from_parts(vec![rows, total], data)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = tape.needs(&ids);
    Ok(tape.push(v, Op::ConcatCols(ids), needs))
}

/// Stacks equally sized values as the rows of a matrix.
pub fn stack_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or_else(|| OtcError::Dimension {
        op: "stack_rows",
        left: vec![],
        right: vec![],
    })?;
    let tape = first.tape;
    let v = {
        let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
        let n = vals[0].len();
        if let Some(bad) = vals.iter().find(|v| v.len() != n) {
            return Err(OtcError::Dimension {
                op: "stack_rows",
                left: vals[0].shape().to_vec(),
                right: bad.shape().to_vec(),
            });
        }
        let data = vals.iter().flat_map(|v| v.data().to_vec()).collect();
        Tensor::from_parts(vec![vals.len(), n], data)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let needs = tape.needs(&ids);
    Ok(tape.push(v, Op::StackRows(ids), needs))
}

/// Sum of one-element values; `None` for an empty list.
pub fn add_all<'t>(terms: &[Var<'t>]) -> Result<Option<Var<'t>>> {
    match terms {
        [] => Ok(None),
        [one] => Ok(Some(one.sum())),
        many => Ok(Some(stack_rows(many)?.sum())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        assert_eq!(i2.matmul(m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        close(x.softmax(None).unwrap().value().data(), &[1.0 / 3.0; 3], 1e-15);
        let big = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = big.softmax(None).unwrap();
        assert!(y.value().is_finite());
        close(y.value().data(), &[1.0, 0.0], 1e-300);
        let m = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(m.softmax(Some(&[true, false])).unwrap().value().data(), &[1.0, 0.0]);
        assert!(matches!(
            m.softmax(Some(&[false, false])),
            Err(OtcError::InvalidMask(_))
        ));
    }

    #[test]
    fn elementwise_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]));
        assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
        assert_eq!(tape.constant(Tensor::scalar(0.0)).sigmoid().item(), 0.5);
        assert!(matches!(x.log(), Err(OtcError::Domain(_))));
        assert!(tape.constant(Tensor::scalar(0.0)).log().is_err());
    }

    #[test]
    fn l2_normalize_cases() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        close(x.l2_normalize().unwrap().value().data(), &[0.6, 0.8], 1e-15);
        let u = tape.constant(Tensor::vector(vec![0.0, 1.0, 0.0]));
        assert_eq!(u.l2_normalize().unwrap().value().data(), &[0.0, 1.0, 0.0]);
        let z = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(z.l2_normalize(), Err(OtcError::DegenerateInput(_))));
    }

    #[test]
    fn tanh_gradient_matches_closed_form() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.3));
        let y = x.tanh();
        let g = tape.backward(y).unwrap();
        let expect = 1.0 - 0.3f64.tanh().powi(2);
        assert!((g.wrt(x).item() - expect).abs() < 1e-15);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).item(), 7.0);
    }

    #[test]
    fn constants_do_not_need_grad() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let x = tape.leaf(Tensor::scalar(5.0));
        let y = c.mul(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(c).item(), 0.0);
        assert_eq!(g.wrt(x).item(), 2.0);
    }

    #[test]
    fn cumprod_values() {
        let tape = Tape::new();
        let r = tape.constant(Tensor::vector(vec![0.9, 0.8, 0.5]));
        close(r.cumprod().value().data(), &[0.9, 0.72, 0.36], 1e-15);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }
}
