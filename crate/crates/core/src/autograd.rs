//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Besides the
//! usual gradients with respect to parameters, [`Tape::backward`] reports
//! gradients with respect to any node flagged with [`Tape::retain`]; the
//! per-example clipping machinery retains layer pre-activations and reads
//! their gradients after a single backward pass.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{col2im_nd, conv_nd, conv_nd_backward, im2col_nd, matmul, PatchGeometry, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Log,
}

impl Unary {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Unary::Tanh => v.tanh(),
            Unary::Sigmoid => sigmoid(v),
            Unary::Relu => v.max(0.0),
            Unary::Log => v.ln(),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// What the normalization divides the centred input by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormDivisor {
    /// `sqrt(var + eps)`, the conventional layer normalization.
    #[default]
    StdDev,
    /// `var + eps`, dividing by the variance itself.
    Variance,
}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBroadcast { x: NodeId, b: NodeId, axis: usize },
    MulBroadcast { x: NodeId, g: NodeId, axis: usize },
    Unary(NodeId, Unary),
    Softmax(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Tensor },
    Sum(NodeId),
    Mean(NodeId),
    MeanAxis { x: NodeId, axis: usize },
    Select { x: NodeId, index: usize },
    Reshape(NodeId),
    Permute { x: NodeId, perm: Vec<usize> },
    Narrow { x: NodeId, axis: usize, start: usize },
    Im2col { x: NodeId, geometry: PatchGeometry },
    Conv { x: NodeId, w: NodeId, geometry: PatchGeometry },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Normalize { x: NodeId, divisor: NormDivisor, scale: Vec<f64> },
    Gather { table: NodeId, indices: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddBroadcast { x, b, .. } => vec![*x, *b],
            Op::Conv { x, w, .. } => vec![*x, *w],
            Op::MulBroadcast { x, g, .. } => vec![*x, *g],
            Op::Scale(x, _)
            | Op::Unary(x, _)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::CrossEntropy { logits: x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Select { x, .. }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::Im2col { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Normalize { x, .. }
            | Op::Gather { table: x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    param: bool,
    retained: bool,
}

/// Which nodes a backward pass reports gradients for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Wrt {
    /// Parameters and retained nodes.
    All,
    Params,
    Retained,
}

/// Gradients keyed by node; each entry has the shape of its node's value.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    grads: HashMap<NodeId, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }
}

/// Record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Contiguous runs of a tensor of `shape` that share one index along
/// `axis`: yields `(run_length, extent)`; run `r` has index `r % extent`.
fn broadcast_runs(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[axis + 1..].iter().product(), shape[axis])
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op, param: false, retained: false });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("unknown node {}", id.0)));
        }
        Ok(())
    }

    /// A constant input; receives a gradient only if retained.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// A trainable leaf whose gradient every backward pass reports.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.param_shared(Arc::new(value))
    }

    /// Like [`Tape::param`] without copying the tensor.
    pub fn param_shared(&mut self, value: Arc<Tensor>) -> NodeId {
        let id = self.push_shared(value, Op::Leaf);
        self.nodes[id.0].param = true;
        id
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].param
    }

    /// Flags a node so backward passes report its gradient.
    pub fn retain(&mut self, id: NodeId) -> Result<()> {
        self.check(id)?;
        self.nodes[id.0].retained = true;
        Ok(())
    }

    pub fn is_retained(&self, id: NodeId) -> bool {
        self.nodes[id.0].retained
    }

    pub fn retained(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.retained).map(|(i, _)| NodeId(i))
    }

    pub fn params(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().enumerate().filter(|(_, n)| n.param).map(|(i, _)| NodeId(i))
    }

    // ---- operations ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x).scale(factor);
        self.push(v, Op::Scale(x, factor))
    }

    fn check_broadcast(&self, x: NodeId, b: NodeId, axis: usize) -> Result<()> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if axis >= xs.len() || bs != [xs[axis]] {
            return dim_err(format!("cannot broadcast {bs:?} along axis {axis} of {xs:?}"));
        }
        Ok(())
    }

    /// `x + b` with the vector `b` broadcast along `axis`.
    pub fn add_broadcast(&mut self, x: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        self.check_broadcast(x, b, axis)?;
        let (xv, bv) = (self.value(x), self.value(b));
        let mut v = xv.clone();
        let (run, extent) = broadcast_runs(xv.shape(), axis);
        for (r, block) in v.data_mut().chunks_exact_mut(run).enumerate() {
            let b = bv.data()[r % extent];
            block.iter_mut().for_each(|o| *o += b);
        }
        Ok(self.push(v, Op::AddBroadcast { x, b, axis }))
    }

    /// `x * g` with the vector `g` broadcast along `axis`.
    pub fn mul_broadcast(&mut self, x: NodeId, g: NodeId, axis: usize) -> Result<NodeId> {
        self.check_broadcast(x, g, axis)?;
        let (xv, gv) = (self.value(x), self.value(g));
        let mut v = xv.clone();
        let (run, extent) = broadcast_runs(xv.shape(), axis);
        for (r, block) in v.data_mut().chunks_exact_mut(run).enumerate() {
            let s = gv.data()[r % extent];
            block.iter_mut().for_each(|o| *o *= s);
        }
        Ok(self.push(v, Op::MulBroadcast { x, g, axis }))
    }

    pub fn unary(&mut self, x: NodeId, f: Unary) -> NodeId {
        let v = self.value(x).map(|v| f.apply(v));
        self.push(v, Op::Unary(x, f))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Relu)
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Unary::Log)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let width = *xv.shape().last().unwrap();
        let mut v = xv.clone();
        for row in v.data_mut().chunks_exact_mut(width) {
            softmax_in_place(row);
        }
        self.push(v, Op::Softmax(x))
    }

    /// Per-example cross-entropy of softmax(logits) against class indices:
    /// `[τ, C] -> [τ]`.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.ndim() != 2 || lv.dim(0) != targets.len() {
            return dim_err(format!(
                "cross_entropy needs [τ, C] logits for {} targets, got {:?}",
                targets.len(),
                lv.shape()
            ));
        }
        let classes = lv.dim(1);
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Contract(format!("target {bad} outside {classes} classes")));
        }
        let mut probs = lv.clone();
        let mut losses = Vec::with_capacity(targets.len());
        for (row, &t) in probs.data_mut().chunks_exact_mut(classes).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            losses.push(lse - row[t]);
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let v = Tensor::from_parts(vec![targets.len()], losses);
        Ok(self.push(v, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / xv.len() as f64);
        self.push(v, Op::Mean(x))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if axis >= xv.ndim() || xv.ndim() < 2 {
            return dim_err(format!("mean_axis({axis}) on {:?}", xv.shape()));
        }
        let shape = xv.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let extent = shape[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &xv.data()[(o * extent + e) * inner..][..inner];
                for (d, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *d += s / extent as f64;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let v = Tensor::from_parts(out_shape, out);
        Ok(self.push(v, Op::MeanAxis { x, axis }))
    }

    /// Element `index` of a flattened node as a one-element node.
    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if index >= xv.len() {
            return dim_err(format!("select({index}) on {:?}", xv.shape()));
        }
        let v = Tensor::scalar(xv.data()[index]);
        Ok(self.push(v, Op::Select { x, index }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = self.value(x).permute(perm)?;
        Ok(self.push(v, Op::Permute { x, perm: perm.to_vec() }))
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(v, Op::Narrow { x, axis, start }))
    }

    pub fn im2col(&mut self, x: NodeId, geometry: &PatchGeometry) -> Result<NodeId> {
        let v = im2col_nd(self.value(x), geometry)?;
        Ok(self.push(v, Op::Im2col { x, geometry: geometry.clone() }))
    }

    /// Convolution of `[τ, c_in, S..]` by a kernel `[c_out, c_in, k..]`.
    pub fn conv(&mut self, x: NodeId, w: NodeId, geometry: &PatchGeometry) -> Result<NodeId> {
        let v = conv_nd(self.value(x), self.value(w), geometry)?;
        Ok(self.push(v, Op::Conv { x, w, geometry: geometry.clone() }))
    }

    /// Max pooling over `[τ, c, H, W]` without padding.
    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return dim_err(format!("max_pool2d needs [τ, c, H, W], got {:?}", xv.shape()));
        }
        let g = PatchGeometry::new(&[kernel, kernel], stride);
        let out = g.output_extents(&xv.shape()[2..])?;
        let [t, c, h, w] = [xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3)];
        let (oh, ow) = (out[0], out[1]);
        let mut vals = Vec::with_capacity(t * c * oh * ow);
        let mut argmax = Vec::with_capacity(t * c * oh * ow);
        for plane in 0..t * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xv.data()[idx] > best.0 {
                                best = (xv.data()[idx], idx);
                            }
                        }
                    }
                    vals.push(best.0);
                    argmax.push(best.1);
                }
            }
        }
        let v = Tensor::from_parts(vec![t, c, oh, ow], vals);
        Ok(self.push(v, Op::MaxPool { x, argmax }))
    }

    /// Centres each last-axis row and divides by its spread.
    pub fn normalize(&mut self, x: NodeId, divisor: NormDivisor, eps: f64) -> NodeId {
        let xv = self.value(x);
        let width = *xv.shape().last().unwrap();
        let mut v = xv.clone();
        let mut scale = Vec::with_capacity(xv.len() / width);
        for row in v.data_mut().chunks_exact_mut(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            row.iter_mut().for_each(|r| *r -= mean);
            let var = row.iter().map(|r| r * r).sum::<f64>() / width as f64;
            let s = match divisor {
                NormDivisor::StdDev => (var + eps).sqrt(),
                NormDivisor::Variance => var + eps,
            };
            row.iter_mut().for_each(|r| *r /= s);
            scale.push(s);
        }
        self.push(v, Op::Normalize { x, divisor, scale })
    }

    /// Rows of a `[V, d]` table: `[indices.len(), d]`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let v = self.value(table).gather_rows(indices)?;
        Ok(self.push(v, Op::Gather { table, indices: indices.to_vec() }))
    }

    // ---- differentiation ----

    /// Gradient of a scalar node with respect to every parameter and every
    /// retained node.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        self.backward_wrt(loss, Wrt::All)
    }

    pub fn backward_wrt(&self, loss: NodeId, wrt: Wrt) -> Result<GradMap> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!("loss must be scalar, got shape {:?}", lv.shape())));
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        self.backward_seeded(loss, seed, wrt)
    }

    /// One backward pass per loss node, each seeing only its own loss.
    pub fn backward_per_example(&self, losses: &[NodeId]) -> Result<Vec<GradMap>> {
        losses.par_iter().map(|&l| self.backward_wrt(l, Wrt::All)).collect()
    }

    /// Vector-Jacobian product from `root` with upstream gradient `seed`.
    pub fn backward_seeded(&self, root: NodeId, seed: Tensor, wrt: Wrt) -> Result<GradMap> {
        self.check(root)?;
        if seed.shape() != self.shape(root) {
            return dim_err(format!("seed shape {:?} differs from node shape {:?}", seed.shape(), self.shape(root)));
        }
        let n = root.0 + 1;
        let is_target = |node: &Node| match wrt {
            Wrt::All => node.param || node.retained,
            Wrt::Params => node.param,
            Wrt::Retained => node.retained,
        };
        let mut needs = vec![false; n];
        for i in 0..n {
            let node = &self.nodes[i];
            needs[i] = is_target(node) || node.op.inputs().iter().any(|p| needs[p.0]);
        }
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut out = GradMap::default();
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !needs[i] {
                continue;
            }
            self.propagate(i, &g, &needs, &mut grads)?;
            if is_target(&self.nodes[i]) {
                out.grads.insert(NodeId(i), g);
            }
        }
        for (i, node) in self.nodes[..n].iter().enumerate() {
            if is_target(node) {
                out.grads.entry(NodeId(i)).or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, needs: &[bool], grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut send = |id: NodeId, t: Tensor| -> Result<()> {
            match &mut grads[id.0] {
                Some(acc) => acc.axpy(1.0, &t),
                slot => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        let val = |id: NodeId| &*self.nodes[id.0].value;
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                if needs[a.0] {
                    let da = if ta { matmul(val(b), g, tb, true)? } else { matmul(g, val(b), false, !tb)? };
                    send(a, da)?;
                }
                if needs[b.0] {
                    let db = if tb { matmul(g, val(a), true, ta)? } else { matmul(val(a), g, !ta, false)? };
                    send(b, db)?;
                }
            }
            &Op::Add(a, b) => {
                if needs[a.0] {
                    send(a, g.clone())?;
                }
                if needs[b.0] {
                    send(b, g.clone())?;
                }
            }
            &Op::Mul(a, b) => {
                if needs[a.0] {
                    send(a, g.mul(val(b))?)?;
                }
                if needs[b.0] {
                    send(b, g.mul(val(a))?)?;
                }
            }
            &Op::Scale(x, f) => send(x, g.scale(f))?,
            &Op::AddBroadcast { x, b, axis } => {
                if needs[x.0] {
                    send(x, g.clone())?;
                }
                if needs[b.0] {
                    let (run, extent) = broadcast_runs(g.shape(), axis);
                    let mut db = vec![0.0; extent];
                    for (r, block) in g.data().chunks_exact(run).enumerate() {
                        db[r % extent] += block.iter().sum::<f64>();
                    }
                    send(b, Tensor::new(vec![extent], db)?)?;
                }
            }
            &Op::MulBroadcast { x, g: gain, axis } => {
                let (xv, gv) = (val(x), val(gain));
                let (run, extent) = broadcast_runs(g.shape(), axis);
                if needs[x.0] {
                    let mut dx = g.clone();
                    for (r, block) in dx.data_mut().chunks_exact_mut(run).enumerate() {
                        let s = gv.data()[r % extent];
                        block.iter_mut().for_each(|o| *o *= s);
                    }
                    send(x, dx)?;
                }
                if needs[gain.0] {
                    let mut dg = vec![0.0; extent];
                    let blocks = g.data().chunks_exact(run).zip(xv.data().chunks_exact(run));
                    for (r, (gb, xb)) in blocks.enumerate() {
                        dg[r % extent] += gb.iter().zip(xb).map(|(u, x)| u * x).sum::<f64>();
                    }
                    send(gain, Tensor::new(vec![extent], dg)?)?;
                }
            }
            &Op::Unary(x, f) => {
                let y: &Tensor = &node.value;
                let dx = match f {
                    Unary::Tanh => g.zip_map(y, |u, y| u * (1.0 - y * y))?,
                    Unary::Sigmoid => g.zip_map(y, |u, y| u * y * (1.0 - y))?,
                    Unary::Relu => g.zip_map(val(x), |u, x| if x > 0.0 { u } else { 0.0 })?,
                    Unary::Log => g.zip_map(val(x), |u, x| u / x)?,
                };
                send(x, dx)?;
            }
            &Op::Softmax(x) => {
                let y: &Tensor = &node.value;
                let width = *y.shape().last().unwrap();
                let mut dx = g.clone();
                for (d, yr) in dx.data_mut().chunks_exact_mut(width).zip(y.data().chunks_exact(width)) {
                    let dot: f64 = d.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (dv, yv) in d.iter_mut().zip(yr) {
                        *dv = yv * (*dv - dot);
                    }
                }
                send(x, dx)?;
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let classes = probs.dim(1);
                let mut dx = probs.clone();
                for (r, (row, &t)) in dx.data_mut().chunks_exact_mut(classes).zip(targets).enumerate() {
                    row[t] -= 1.0;
                    let u = g.data()[r];
                    row.iter_mut().for_each(|v| *v *= u);
                }
                send(*logits, dx)?;
            }
            &Op::Sum(x) => send(x, Tensor::full(val(x).shape(), g.data()[0]))?,
            &Op::Mean(x) => {
                let n = val(x).len() as f64;
                send(x, Tensor::full(val(x).shape(), g.data()[0] / n))?
            }
            &Op::MeanAxis { x, axis } => {
                let shape = val(x).shape();
                let inner: usize = shape[axis + 1..].iter().product();
                let extent = shape[axis];
                let mut dx = Tensor::zeros(shape);
                for (k, d) in dx.data_mut().iter_mut().enumerate() {
                    let (o, rem) = (k / (extent * inner), k % inner);
                    *d = g.data()[o * inner + rem] / extent as f64;
                }
                send(x, dx)?;
            }
            &Op::Select { x, index } => {
                let mut dx = Tensor::zeros(val(x).shape());
                dx.data_mut()[index] = g.data()[0];
                send(x, dx)?;
            }
            &Op::Reshape(x) => send(x, g.reshape(val(x).shape())?)?,
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                send(*x, g.permute(&inv)?)?;
            }
            &Op::Narrow { x, axis, start } => send(x, g.unnarrow(axis, start, val(x).dim(axis)))?,
            Op::Im2col { x, geometry } => send(*x, col2im_nd(g, val(*x).shape(), geometry)?)?,
            Op::Conv { x, w, geometry } => {
                let (dx, dw) = conv_nd_backward(g, val(*x), val(*w), geometry, needs[x.0], needs[w.0])?;
                if let Some(dx) = dx {
                    send(*x, dx)?;
                }
                if let Some(dw) = dw {
                    send(*w, dw)?;
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(val(*x).shape());
                for (u, &j) in g.data().iter().zip(argmax) {
                    dx.data_mut()[j] += u;
                }
                send(*x, dx)?;
            }
            Op::Normalize { x, divisor, scale } => {
                let xv = val(*x);
                let width = *xv.shape().last().unwrap();
                let k = width as f64;
                let mut dx = Tensor::zeros(xv.shape());
                let rows = xv.data().chunks_exact(width).zip(g.data().chunks_exact(width));
                for ((out, (xr, gr)), &s) in dx.data_mut().chunks_exact_mut(width).zip(rows).zip(scale) {
                    let mean = xr.iter().sum::<f64>() / k;
                    // s = f(v) with v the row variance; ds/dv:
                    let dsdv = match divisor {
                        NormDivisor::StdDev => 0.5 / s,
                        NormDivisor::Variance => 1.0,
                    };
                    let gd: f64 = gr.iter().zip(xr).map(|(u, xv)| u * (xv - mean)).sum();
                    let coeff = gd * dsdv * 2.0 / (k * s * s);
                    for ((o, u), xv) in out.iter_mut().zip(gr).zip(xr) {
                        *o = u / s - coeff * (xv - mean);
                    }
                    let m = out.iter().sum::<f64>() / k;
                    out.iter_mut().for_each(|o| *o -= m);
                }
                send(*x, dx)?;
            }
            Op::Gather { table, indices } => {
                let tv = val(*table);
                let width = tv.row_len();
                let mut dt = Tensor::zeros(tv.shape());
                for (row, &i) in g.data().chunks_exact(width).zip(indices) {
                    for (d, u) in dt.data_mut()[i * width..(i + 1) * width].iter_mut().zip(row) {
                        *d += u;
                    }
                }
                send(*table, dt)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
