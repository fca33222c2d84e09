//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its nodes during the forward
//! pass. [`Tape::backward`] replays the records in reverse and accumulates
//! vector-Jacobian products into the parameters that were registered with
//! [`Tape::param`]. A tape is consumed by the backward pass; build a fresh one
//! for every batch.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::array::{
    self, check_distribution, log_softmax, row_moments, softmax_slice, Array, DENOM_FLOOR,
};
use crate::numerics::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `[R×C] + [C]`, the bias broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `scale · x + shift`
    Affine(NodeId, f64),
    MaskMul(NodeId, Array),
    Transpose(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: Array,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Sigmoid(NodeId),
    /// `x / max(Σx, floor)`
    NormalizeSum {
        x: NodeId,
        total: f64,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        start: usize,
    },
    /// Sum over rows of the soft cross-entropy against a constant target.
    SoftCrossEntropy {
        logits: NodeId,
        target: Array,
    },
    Sum(NodeId),
}

struct Node {
    value: Array,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    entries: Vec<(ParamId, Array)>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamId, Array)> {
        self.entries.iter()
    }

    /// Adds `scale · grad` into each parameter's gradient buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore, scale: f64) {
        for (id, g) in &self.entries {
            let dst = &mut store.get_mut(*id).grad;
            for (d, v) in dst.data_mut().iter_mut().zip(g.data()) {
                *d += scale * v;
            }
        }
    }
}

fn shape_err(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn as_matrix(a: &Array) -> Array {
    let (r, c) = (a.rows(), a.cols());
    a.clone().reshape(vec![r, c]).expect("same element count")
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

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Registers a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.params.get(&id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Param(id));
        self.params.insert(id, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = array::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if va.rank() != 2 || vb.len() != va.cols() {
            return Err(shape_err("add_row", va, vb));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    /// `x · W + b` for `x: [R×I]`, `W: [I×O]`, `b: [O]`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, weight)?;
        self.add_row(h, bias)
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.affine(x, scale, 0.0)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mask_mul(&mut self, x: NodeId, mask: Array) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.shape() != mask.shape() {
            return Err(shape_err("mask_mul", vx, &mask));
        }
        let mut out = vx.clone();
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        Ok(self.push(out, Op::MaskMul(x, mask)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    /// Softmax over the last axis of a matrix (a vector is a single row).
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            softmax_slice(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let out = array::layer_norm(vx, self.value(gain), self.value(bias))?;
        let mut normed = vx.clone();
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let (mean, is) = row_moments(vx.row(r));
            for v in normed.row_mut(r) {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()));
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Divides by the sum of all entries, with the sum floored at 1e-12.
    pub fn normalize_sum(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let total: f64 = vx.data().iter().sum();
        let denom = total.max(DENOM_FLOOR);
        let out = vx.map(|v| v / denom);
        self.push(out, Op::NormalizeSum { x, total })
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 2 || start + width > vx.cols() || width == 0 {
            return Err(Error::Shape {
                op: "slice_cols",
                left: vx.shape().to_vec(),
                right: vec![start, width],
            });
        }
        let rows = vx.rows();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&vx.row(r)[start..start + width]);
        }
        let out = Array::new(vec![rows, width], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), v));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Array::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.rank() != 2 || start + len > vx.rows() || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                left: vx.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let c = vx.cols();
        let data = vx.data()[start * c..(start + len) * c].to_vec();
        let out = Array::new(vec![len, c], data)?;
        Ok(self.push(out, Op::SliceRows { x, start }))
    }

    /// Soft cross-entropy summed over rows; `target` has the logits' shape
    /// and every row must be a probability distribution.
    pub fn soft_cross_entropy(&mut self, logits: NodeId, target: Array) -> Result<NodeId> {
        let vl = self.value(logits);
        if vl.len() != target.len() || vl.cols() != target.cols() {
            return Err(shape_err("soft_cross_entropy", vl, &target));
        }
        let mut loss = 0.0;
        for r in 0..vl.rows() {
            loss += array::soft_cross_entropy(vl.row(r), target.row(r))?;
        }
        Ok(self.push(Array::scalar(loss), Op::SoftCrossEntropy { logits, target }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().sum();
        self.push(Array::scalar(total), Op::Sum(x))
    }

    /// Runs the reverse sweep from a scalar `loss` and returns the gradient
    /// of every registered parameter that the loss depends on.
    pub fn gradients(self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Array::filled(lv.shape(), 1.0));
        let mut out = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.push((*id, g)),
                Op::MatMul(a, b) => {
                    let va = as_matrix(self.value(*a));
                    let vb = as_matrix(self.value(*b));
                    let ga = array::matmul(&g, &vb.transpose())?;
                    let gb = array::matmul(&va.transpose(), &g)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Array::zeros(self.value(*bias).shape());
                    for r in 0..g.rows() {
                        for (d, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *a, g);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Affine(x, scale) => accumulate(&mut grads, *x, g.map(|v| v * scale)),
                Op::MaskMul(x, mask) => {
                    let mut gx = g;
                    for (d, m) in gx.data_mut().iter_mut().zip(mask.data()) {
                        *d *= m;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Transpose(x) => accumulate(&mut grads, *x, g.transpose()),
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = g;
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let dot: f64 = gx.row(r).iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (d, yv) in gx.row_mut(r).iter_mut().zip(yr) {
                            *d = yv * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let vg = self.value(*gain);
                    let d = normed.cols();
                    let mut gx = Array::zeros(normed.shape());
                    let mut g_gain = Array::zeros(vg.shape());
                    let mut g_bias = Array::zeros(vg.shape());
                    let mut dxhat = vec![0.0; d];
                    for r in 0..normed.rows() {
                        let (gr, nr) = (g.row(r), normed.row(r));
                        for j in 0..d {
                            dxhat[j] = gr[j] * vg.data()[j];
                            g_gain.data_mut()[j] += gr[j] * nr[j];
                            g_bias.data_mut()[j] += gr[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dn =
                            dxhat.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for (j, out) in gx.row_mut(r).iter_mut().enumerate() {
                            *out = inv_std[r] * (dxhat[j] - mean_d - nr[j] * mean_dn);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, g_gain);
                    accumulate(&mut grads, *bias, g_bias);
                }
                Op::Gelu(x) => {
                    let vx = self.value(*x);
                    let mut gx = g;
                    for (d, &v) in gx.data_mut().iter_mut().zip(vx.data()) {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *d *= 0.5 * (1.0 + t) + 0.5 * v * dt;
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (d, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::NormalizeSum { x, total } => {
                    let gx = if *total > DENOM_FLOOR {
                        let dot: f64 = g
                            .data()
                            .iter()
                            .zip(node.value.data())
                            .map(|(a, b)| a * b)
                            .sum();
                        g.map(|v| (v - dot) / total)
                    } else {
                        g.map(|v| v / DENOM_FLOOR)
                    };
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Array::zeros(self.value(*x).shape());
                    let w = g.cols();
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut gp = Array::zeros(self.value(p).shape());
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        accumulate(&mut grads, p, gp);
                    }
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Array::zeros(self.value(*x).shape());
                    let c = g.cols();
                    gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftCrossEntropy { logits, target } => {
                    let scale = g.item();
                    let vl = self.value(*logits);
                    let mut gx = Array::zeros(vl.shape());
                    for r in 0..vl.rows() {
                        let tr = target.row(r);
                        let mass: f64 = tr.iter().sum();
                        let lsm = log_softmax(vl.row(r));
                        for (j, d) in gx.row_mut(r).iter_mut().enumerate() {
                            *d = scale * (mass * lsm[j].exp() - tr[j]);
                        }
                    }
                    accumulate(&mut grads, *logits, gx);
                }
                Op::Sum(x) => {
                    let gx = Array::filled(self.value(*x).shape(), g.item());
                    accumulate(&mut grads, *x, gx);
                }
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(Gradients { entries: out })
    }

    /// Reverse sweep that adds every parameter gradient into `store`.
    pub fn backward(self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        self.gradients(loss)?.accumulate_into(store, 1.0);
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Array>], id: NodeId, g: Array) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Validates that every row of `target` is a probability distribution.
pub fn check_target_rows(target: &Array) -> Result<()> {
    (0..target.rows()).try_for_each(|r| check_distribution(target.row(r)))
}
