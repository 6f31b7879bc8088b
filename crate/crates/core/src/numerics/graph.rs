//! Reverse-mode differentiation over whole-array operations.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the indices of its operands. [`Graph::backward`] walks the tape in
//! reverse and returns a [`Gradients`] table. Leaves created with
//! [`Graph::constant`] (or bound as frozen parameters) never receive a
//! gradient buffer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::array::{gemm_nt, gemm_tn};
use super::NdArray;
use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Trainable array with an accumulating gradient buffer.
///
/// Cloning assigns a new identity, so a cloned network never aliases the
/// original inside a graph.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    pub value: NdArray,
    pub grad: Option<NdArray>,
}

impl Param {
    pub fn new(value: NdArray) -> Self {
        Param {
            id: ParamId::fresh(),
            value,
            grad: None,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Param {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

impl Serialize for Param {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.value.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Param {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        NdArray::deserialize(d).map(Param::new)
    }
}

/// How a parameter enters a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    /// Gradient flows into the parameter.
    Trainable,
    /// Parameter is a constant for this graph.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    RowScale(Var, Arc<Vec<f64>>),
    Silu(Var),
    Tanh(Var),
    LogSoftmax(Var),
    LayerNorm(Var, Arc<Vec<f64>>),
    Sum(Var),
    Reshape(Var),
    NchwToRows(Var),
    RowsToNchw(Var),
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    trainable: HashMap<ParamId, Var>,
    frozen: HashMap<ParamId, Var>,
    non_finite: Option<&'static str>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: NdArray, op: Op, requires_grad: bool, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(name);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First operation that produced a non-finite value, if any.
    pub fn non_finite_op(&self) -> Option<&'static str> {
        self.non_finite
    }

    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf, true, "input")
    }

    pub fn param(&mut self, p: &Param, bind: Bind) -> Var {
        let table = match bind {
            Bind::Trainable => &self.trainable,
            Bind::Frozen => &self.frozen,
        };
        if let Some(&v) = table.get(&p.id) {
            return v;
        }
        let v = self.push(
            p.value.clone(),
            Op::Leaf,
            bind == Bind::Trainable,
            "param",
        );
        match bind {
            Bind::Trainable => self.trainable.insert(p.id, v),
            Bind::Frozen => self.frozen.insert(p.id, v),
        };
        v
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg, "matmul")
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(xv.shape().len(), 2, "add_bias expects a matrix");
        let n = xv.shape()[1];
        assert_eq!(bv.len(), n, "bias length {} vs {} columns", bv.len(), n);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddBias(x, bias), rg, "add_bias")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg, "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg, "scale")
    }

    /// Multiplies row `i` of a matrix by `factors[i]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 2, "row_scale expects a matrix");
        assert_eq!(xv.shape()[0], factors.len(), "row_scale factor count");
        let n = xv.shape()[1];
        let mut out = xv.clone();
        for (row, f) in out.data_mut().chunks_mut(n).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x);
        self.push(out, Op::RowScale(x, Arc::new(factors)), rg, "row_scale")
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg, "silu")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg, "tanh")
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(x);
        self.push(out, Op::LogSoftmax(x), rg, "log_softmax")
    }

    /// Standardizes each row (last axis) to zero mean and unit variance,
    /// without a learned affine.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.len() / n.max(1));
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm(x, Arc::new(inv_std)), rg, "layer_norm")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = NdArray::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_sq(&mut self, x: Var) -> Var {
        let sq = self.mul(x, x);
        self.sum(sq)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg, "reshape")
    }

    /// `[B, C, H, W]` → `[B·H·W, C]`: one row per spatial position.
    pub fn nchw_to_rows(&mut self, x: Var) -> Var {
        let value = nchw_to_rows(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::NchwToRows(x), rg, "nchw_to_rows")
    }

    /// Inverse of [`Graph::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: Var, b: usize, h: usize, w: usize) -> Var {
        let value = rows_to_nchw(self.value(x), b, h, w);
        let rg = self.rg(x);
        self.push(value, Op::RowsToNchw(x), rg, "rows_to_nchw")
    }

    /// Gradients of the scalar `loss` with respect to every reachable node
    /// that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if let Some(op) = self.non_finite {
            return Err(Error::numeric(format!("non-finite value produced by {op}")));
        }
        let mut grads: Vec<Option<NdArray>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(NdArray::full(lv.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // only leaves keep their buffers; intermediates are dropped
        let leaf_grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match n.op {
                Op::Leaf if n.requires_grad => g,
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads: leaf_grads,
            params: self.trainable.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<NdArray>], v: Var, delta: NdArray) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &NdArray, g: &NdArray, grads: &mut [Option<NdArray>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), bv.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, NdArray::from_vec(&[m, k], ga).unwrap());
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(av.data(), g.data(), &mut gb, k, m, n);
                    self.accumulate(grads, *b, NdArray::from_vec(&[k, n], gb).unwrap());
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let bv = self.value(*b);
                    let n = bv.len();
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, NdArray::from_vec(bv.shape(), gb).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.scale(*s)),
            Op::RowScale(x, factors) => {
                let n = g.shape()[1];
                let mut gx = g.clone();
                for (row, f) in gx.data_mut().chunks_mut(n).zip(factors.iter()) {
                    row.iter_mut().for_each(|v| *v *= f);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Silu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (1.0 + xv * (1.0 - s))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.zip_map(out, |gv, y| gv * (1.0 - y * y));
                self.accumulate(grads, *x, gx);
            }
            Op::LogSoftmax(x) => {
                let n = *out.shape().last().unwrap();
                let mut gx = g.clone();
                for (grow, orow) in gx.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    for (gv, lp) in grow.iter_mut().zip(orow) {
                        *gv -= lp.exp() * total;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm(x, inv_std) => {
                let n = *out.shape().last().unwrap();
                let mut gx = g.clone();
                let rows = gx.data_mut().chunks_mut(n).zip(out.data().chunks(n));
                for ((grow, yrow), inv) in rows.zip(inv_std.iter()) {
                    let mg = grow.iter().sum::<f64>() / n as f64;
                    let mgy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = inv * (*gv - mg - y * mgy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                self.accumulate(grads, *x, NdArray::full(shape, g.item()));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape).unwrap());
            }
            Op::NchwToRows(x) => {
                let s = self.value(*x).shape();
                let gx = rows_to_nchw(g, s[0], s[2], s[3]);
                self.accumulate(grads, *x, gx);
            }
            Op::RowsToNchw(x) => self.accumulate(grads, *x, nchw_to_rows(g)),
        }
    }
}

/// Gradient table produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Graph::input`] or a trainable param.
    pub fn wrt(&self, v: Var) -> Option<&NdArray> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn of_param(&self, p: &Param) -> Option<&NdArray> {
        self.params.get(&p.id()).and_then(|v| self.wrt(*v))
    }

    /// Adds each parameter's gradient to its buffer. Parameters the loss did
    /// not reach are left untouched.
    pub fn accumulate_into<'a>(&self, params: impl IntoIterator<Item = &'a mut Param>) {
        for p in params {
            if let Some(g) = self.of_param(p) {
                match &mut p.grad {
                    Some(buf) => buf.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn nchw_to_rows(x: &NdArray) -> NdArray {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected B×C×H×W, got {s:?}");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let src = x.data();
    let mut out = vec![0.0; b * c * hw];
    for bi in 0..b {
        for ci in 0..c {
            for si in 0..hw {
                out[(bi * hw + si) * c + ci] = src[(bi * c + ci) * hw + si];
            }
        }
    }
    NdArray::from_vec(&[b * hw, c], out).unwrap()
}

pub(crate) fn rows_to_nchw(x: &NdArray, b: usize, h: usize, w: usize) -> NdArray {
    let s = x.shape();
    assert_eq!(s.len(), 2);
    let hw = h * w;
    assert_eq!(s[0], b * hw, "row count {} vs B·H·W {}", s[0], b * hw);
    let c = s[1];
    let src = x.data();
    let mut out = vec![0.0; b * c * hw];
    for bi in 0..b {
        for ci in 0..c {
            for si in 0..hw {
                out[(bi * c + ci) * hw + si] = src[(bi * hw + si) * c + ci];
            }
        }
    }
    NdArray::from_vec(&[b, c, h, w], out).unwrap()
}
