//! Layer wrappers and closed-form per-example gradients.
//!
//! Each parametrized layer records a [`LayerCache`] during the forward pass:
//! the node holding its input and the retained node holding its
//! pre-activation. Given the gradient of the loss with respect to the
//! pre-activation, the per-example parameter gradients follow from batched
//! matrix products with the cached input, without any per-example backward
//! pass.

use std::sync::Arc;

use crate::autograd::{GradMap, NodeId, NormDivisor, Tape, Unary};
use crate::error::{dim_err, Error, Result};
use crate::tensor::{
    conv_nd_record_grads, conv_nd_record_sq_norms, matmul, outer_batch, sq_norm_rows, sq_norms_of_products,
    PatchGeometry, Tensor,
};

/// Index of a parameter tensor inside a [`crate::model::Model`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// A named trainable tensor. `group` identifies the owning layer.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    pub group: usize,
}

/// State of one forward pass: the tape, the tape nodes bound to each
/// parameter and the caches of every parametrized layer.
pub struct Forward {
    pub tape: Tape,
    params: Vec<NodeId>,
    pub caches: Vec<LayerCache>,
    retain: bool,
}

impl Forward {
    pub fn new(params: &[Param], retain: bool) -> Self {
        let mut tape = Tape::new();
        let params = params.iter().map(|p| tape.param_shared(Arc::clone(&p.value))).collect();
        Self { tape, params, caches: Vec::new(), retain }
    }

    pub fn param(&self, id: ParamId) -> NodeId {
        self.params[id.0]
    }

    pub fn param_nodes(&self) -> &[NodeId] {
        &self.params
    }

    pub fn retains(&self) -> bool {
        self.retain
    }

    fn record(&mut self, cache: LayerCache) -> Result<()> {
        if self.retain {
            for id in cache.retained_nodes() {
                self.tape.retain(id)?;
            }
            self.caches.push(cache);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// closed-form per-example gradients
// ---------------------------------------------------------------------------

fn same_batch(a: &Tensor, b: &Tensor, what: &str) -> Result<usize> {
    if a.dim(0) != b.dim(0) {
        return dim_err(format!("{what}: batch extents differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(a.dim(0))
}

/// Per-example gradients of a fully-connected layer `z = W x + b`.
///
/// With `dz: [τ, m]` and `x: [τ, n]`, `gradW[i] = dz[i] ⊗ x[i]` and
/// `gradB[i] = dz[i]`. Sequence inputs `dz: [τ, s, m]`, `x: [τ, s, n]`
/// (a layer applied at every position) give `gradW[i] = dz[i]ᵀ x[i]` and
/// `gradB[i] = Σ_s dz[i, s]`.
pub fn linear_pe_grad(dz: &Tensor, x: &Tensor) -> Result<(Tensor, Tensor)> {
    same_batch(dz, x, "linear_pe_grad")?;
    match (dz.ndim(), x.ndim()) {
        (2, 2) => Ok((outer_batch(dz, x)?, dz.clone())),
        (3, 3) if dz.dim(1) == x.dim(1) => {
            let gw = matmul(dz, x, true, false)?;
            Ok((gw, sum_axis1(dz)))
        }
        _ => dim_err(format!("linear_pe_grad: incompatible {:?} and {:?}", dz.shape(), x.shape())),
    }
}

/// `‖dz[i] ⊗ x[i]‖²_F = ‖dz[i]‖² ‖x[i]‖²`; weight part only.
pub fn linear_pe_sqnorm(dz: &Tensor, x: &Tensor) -> Result<Tensor> {
    same_batch(dz, x, "linear_pe_sqnorm")?;
    if dz.ndim() != 2 || x.ndim() != 2 {
        return dim_err(format!("linear_pe_sqnorm needs [τ, m] and [τ, n], got {:?} and {:?}", dz.shape(), x.shape()));
    }
    sq_norm_rows(dz).mul(&sq_norm_rows(x))
}

/// `[τ, s, d] -> [τ, d]`.
fn sum_axis1(t: &Tensor) -> Tensor {
    let (tau, s, d) = (t.dim(0), t.dim(1), t.dim(2));
    let mut out = vec![0.0; tau * d];
    for (i, block) in t.data().chunks_exact(s * d).enumerate() {
        for row in block.chunks_exact(d) {
            for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    Tensor::from_parts(vec![tau, d], out)
}

/// Per-example kernel and bias gradients of a convolution with any number
/// of spatial axes.
///
/// `dz: [τ, c_out, O_1..O_d]`, `x: [τ, c_in, S_1..S_d]`. The kernel gradient
/// is `bmm(reshape(dz, [τ, c_out, P]), im2col(x))` reshaped to
/// `[τ, c_out, c_in, k_1..k_d]`; the bias gradient sums `dz` over positions.
pub fn conv_pe_grad(dz: &Tensor, x: &Tensor, geometry: &PatchGeometry) -> Result<(Tensor, Tensor)> {
    let tau = same_batch(dz, x, "conv_pe_grad")?;
    let nd = geometry.kernel.len();
    if x.ndim() != nd + 2 || dz.ndim() != nd + 2 {
        return dim_err(format!("conv_pe_grad over {nd} spatial axes: got dz {:?}, x {:?}", dz.shape(), x.shape()));
    }
    let out = geometry.output_extents(&x.shape()[2..])?;
    if dz.shape()[2..] != out[..] {
        return dim_err(format!(
            "conv_pe_grad: dz spatial extents {:?} do not match output {:?} of input {:?}",
            &dz.shape()[2..],
            out,
            x.shape()
        ));
    }
    let (c_out, c_in) = (dz.dim(1), x.dim(1));
    let gk = conv_nd_record_grads(dz, x, geometry)?;
    let mut kshape = vec![tau, c_out, c_in];
    kshape.extend_from_slice(&geometry.kernel);
    Ok((gk.into_reshape(&kshape)?, conv_bias_pe_grad(dz)))
}

fn conv_bias_pe_grad(dz: &Tensor) -> Tensor {
    let (tau, c_out) = (dz.dim(0), dz.dim(1));
    let p = dz.len() / (tau * c_out);
    Tensor::from_parts(vec![tau, c_out], dz.data().chunks_exact(p).map(|r| r.iter().sum()).collect())
}

/// Per-example squared gradient norm of a convolution's kernel and bias,
/// `[τ]`, formed one record at a time.
pub fn conv_pe_sqnorm(dz: &Tensor, x: &Tensor, geometry: &PatchGeometry) -> Result<Tensor> {
    conv_nd_record_sq_norms(dz, x, geometry)?.add(&sq_norm_rows(&conv_bias_pe_grad(dz)))
}

/// Stride-1, unpadded 2-D convolution with a `κ_h × κ_w` kernel.
pub fn conv2d_pe_grad(dz: &Tensor, x: &Tensor, kh: usize, kw: usize) -> Result<(Tensor, Tensor)> {
    conv_pe_grad(dz, x, &PatchGeometry::new(&[kh, kw], 1))
}

/// Stride-1, unpadded 3-D convolution with a `κ_d × κ_h × κ_w` kernel.
pub fn conv3d_pe_grad(dz: &Tensor, x: &Tensor, kernel: [usize; 3]) -> Result<(Tensor, Tensor)> {
    conv_pe_grad(dz, x, &PatchGeometry::new(&kernel, 1))
}

/// Per-example gradients of a recurrent layer `z_t = W h_{t-1} + V x_t + b`.
///
/// `hs[t]` holds `h_{t-1}`, so `hs[0]` is the initial state. The
/// per-timestep outer products are summed:
/// `gradW[i] = Σ_t dz_t[i] ⊗ h_{t-1}[i]`, `gradV[i] = Σ_t dz_t[i] ⊗ x_t[i]`,
/// `gradB[i] = Σ_t dz_t[i]`.
pub fn rnn_pe_grad(dzs: &[Tensor], hs: &[Tensor], xs: &[Tensor]) -> Result<(Tensor, Tensor, Tensor)> {
    let (dz, h, x) = stack_sequences(dzs, hs, xs)?;
    Ok((matmul(&dz, &h, true, false)?, matmul(&dz, &x, true, false)?, sum_axis1(&dz)))
}

/// Per-example squared gradient norms of a recurrent layer, `[τ]`.
pub fn rnn_pe_sqnorm(dzs: &[Tensor], hs: &[Tensor], xs: &[Tensor]) -> Result<Tensor> {
    let (dz, h, x) = stack_sequences(dzs, hs, xs)?;
    sq_norms_of_products(&dz, &h)?.add(&sq_norms_of_products(&dz, &x)?)?.add(&sq_norm_rows(&sum_axis1(&dz)))
}

fn stack_sequences(dzs: &[Tensor], hs: &[Tensor], xs: &[Tensor]) -> Result<(Tensor, Tensor, Tensor)> {
    let steps = dzs.len();
    if steps == 0 || hs.len() != steps || xs.len() != steps {
        return dim_err(format!(
            "recurrent per-example gradients: sequence lengths differ or are empty ({}, {}, {})",
            dzs.len(),
            hs.len(),
            xs.len()
        ));
    }
    Ok((stack_steps(dzs)?, stack_steps(hs)?, stack_steps(xs)?))
}

/// `T` tensors of shape `[τ, d]` as one `[τ, T, d]` tensor.
fn stack_steps(steps: &[Tensor]) -> Result<Tensor> {
    let first = steps[0].shape();
    if steps.iter().any(|s| s.ndim() != 2 || s.shape() != first) {
        return dim_err("every timestep tensor must be [τ, d] with one shape");
    }
    let (tau, d, t) = (first[0], first[1], steps.len());
    let mut out = vec![0.0; tau * t * d];
    for (k, step) in steps.iter().enumerate() {
        for (i, row) in step.data().chunks_exact(d).enumerate() {
            out[(i * t + k) * d..(i * t + k + 1) * d].copy_from_slice(row);
        }
    }
    Tensor::new(vec![tau, t, d], out)
}

/// LSTM per-example gradients; `dzs[t]` is the gradient of the stacked
/// gate pre-activations `[z_f; z_i; z_g; z_o]` of shape `[τ, 4m]`.
pub fn lstm_pe_grad(dzs: &[Tensor], hs: &[Tensor], xs: &[Tensor]) -> Result<(Tensor, Tensor, Tensor)> {
    check_lstm_widths(dzs, hs)?;
    rnn_pe_grad(dzs, hs, xs)
}

fn check_lstm_widths(dzs: &[Tensor], hs: &[Tensor]) -> Result<()> {
    for (dz, h) in dzs.iter().zip(hs) {
        if dz.ndim() != 2 || h.ndim() != 2 || dz.dim(1) != 4 * h.dim(1) {
            return dim_err(format!(
                "lstm_pe_grad: gate gradient {:?} must have 4x the hidden width of {:?}",
                dz.shape(),
                h.shape()
            ));
        }
    }
    Ok(())
}

/// LayerNorm per-example gradients: `gradGamma = dh ⊙ h̄`, `gradBeta = dh`,
/// summed over positions for `[τ, s, κ]` inputs.
pub fn layernorm_pe_grad(dh: &Tensor, hbar: &Tensor) -> Result<(Tensor, Tensor)> {
    if dh.shape() != hbar.shape() {
        return dim_err(format!("layernorm_pe_grad: {:?} vs {:?}", dh.shape(), hbar.shape()));
    }
    let gg = dh.mul(hbar)?;
    match dh.ndim() {
        2 => Ok((gg, dh.clone())),
        3 => Ok((sum_axis1(&gg), sum_axis1(dh))),
        _ => dim_err(format!("layernorm_pe_grad: unsupported rank {:?}", dh.shape())),
    }
}

/// Per-example gradients of the four attention projections.
///
/// Every argument is `[τ, s, d_m]`: gradients with respect to the
/// projected queries, keys, values and the output, then the projection
/// inputs and the concatenated attention values `H`. Returns
/// `[gradWQ, gradWK, gradWV, gradWO]`, each `[τ, d_m, d_m]`, with
/// `gradWQ[i] = dQ[i]ᵀ Q_in[i]` and so on.
#[allow(clippy::too_many_arguments)]
pub fn attention_pe_grad(
    dq: &Tensor,
    dk: &Tensor,
    dv: &Tensor,
    dy: &Tensor,
    qin: &Tensor,
    kin: &Tensor,
    vin: &Tensor,
    h: &Tensor,
) -> Result<[Tensor; 4]> {
    let shape = dq.shape();
    for t in [dk, dv, dy, qin, kin, vin, h] {
        if t.ndim() != 3 || t.shape() != shape {
            return dim_err(format!("attention_pe_grad: {:?} vs {:?}", t.shape(), shape));
        }
    }
    Ok([
        matmul(dq, qin, true, false)?,
        matmul(dk, kin, true, false)?,
        matmul(dv, vin, true, false)?,
        matmul(dy, h, true, false)?,
    ])
}

// ---------------------------------------------------------------------------
// caches
// ---------------------------------------------------------------------------

/// Nodes retained by one parametrized layer during a forward pass.
#[derive(Clone, Debug)]
pub enum LayerCache {
    Linear {
        weight: ParamId,
        bias: ParamId,
        x: NodeId,
        z: NodeId,
    },
    Conv {
        weight: ParamId,
        bias: ParamId,
        x: NodeId,
        z: NodeId,
        geometry: PatchGeometry,
    },
    Recurrent {
        lstm: bool,
        weight_h: ParamId,
        weight_x: ParamId,
        bias: ParamId,
        xs: Vec<NodeId>,
        hs: Vec<NodeId>,
        zs: Vec<NodeId>,
    },
    LayerNorm {
        gamma: ParamId,
        beta: ParamId,
        hbar: NodeId,
        out: NodeId,
    },
    Attention {
        weights: [ParamId; 4],
        x: NodeId,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        h: NodeId,
        y: NodeId,
    },
    /// A parametrized layer with no closed-form per-example gradient.
    Unsupported {
        name: &'static str,
        params: Vec<ParamId>,
    },
}

fn retained_grad(grads: &GradMap, id: NodeId) -> Result<&Tensor> {
    grads.get(id).ok_or_else(|| Error::Contract(format!("no gradient for retained node {}", id.index())))
}

impl LayerCache {
    pub fn name(&self) -> &'static str {
        match self {
            LayerCache::Linear { .. } => "linear",
            LayerCache::Conv { geometry, .. } if geometry.kernel.len() == 3 => "conv3d",
            LayerCache::Conv { .. } => "conv2d",
            LayerCache::Recurrent { lstm: true, .. } => "lstm",
            LayerCache::Recurrent { .. } => "rnn",
            LayerCache::LayerNorm { .. } => "layernorm",
            LayerCache::Attention { .. } => "attention",
            LayerCache::Unsupported { name, .. } => name,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            LayerCache::Linear { weight, bias, .. } | LayerCache::Conv { weight, bias, .. } => vec![*weight, *bias],
            LayerCache::Recurrent { weight_h, weight_x, bias, .. } => vec![*weight_h, *weight_x, *bias],
            LayerCache::LayerNorm { gamma, beta, .. } => vec![*gamma, *beta],
            LayerCache::Attention { weights, .. } => weights.to_vec(),
            LayerCache::Unsupported { params, .. } => params.clone(),
        }
    }

    /// Nodes whose gradients the per-example formulas consume.
    pub fn retained_nodes(&self) -> Vec<NodeId> {
        match self {
            LayerCache::Linear { z, .. } | LayerCache::Conv { z, .. } => vec![*z],
            LayerCache::Recurrent { zs, .. } => zs.clone(),
            LayerCache::LayerNorm { out, .. } => vec![*out],
            LayerCache::Attention { q, k, v, y, .. } => vec![*q, *k, *v, *y],
            LayerCache::Unsupported { .. } => vec![],
        }
    }

    /// Materialized per-example gradients (leading axis τ) for each of this
    /// layer's parameters.
    pub fn per_example_grads(&self, tape: &Tape, grads: &GradMap) -> Result<Vec<(ParamId, Tensor)>> {
        let g = |id| retained_grad(grads, id);
        let v = |id| tape.value(id);
        Ok(match self {
            LayerCache::Linear { weight, bias, x, z } => {
                let (gw, gb) = linear_pe_grad(g(*z)?, v(*x))?;
                vec![(*weight, gw), (*bias, gb)]
            }
            LayerCache::Conv { weight, bias, x, z, geometry } => {
                let (gk, gb) = conv_pe_grad(g(*z)?, v(*x), geometry)?;
                vec![(*weight, gk), (*bias, gb)]
            }
            LayerCache::Recurrent { lstm, weight_h, weight_x, bias, xs, hs, zs } => {
                let dzs = zs.iter().map(|&z| g(z).cloned()).collect::<Result<Vec<_>>>()?;
                let hv: Vec<Tensor> = hs.iter().map(|&h| v(h).clone()).collect();
                let xv: Vec<Tensor> = xs.iter().map(|&x| v(x).clone()).collect();
                let (gw, gv, gb) = if *lstm { lstm_pe_grad(&dzs, &hv, &xv)? } else { rnn_pe_grad(&dzs, &hv, &xv)? };
                vec![(*weight_h, gw), (*weight_x, gv), (*bias, gb)]
            }
            LayerCache::LayerNorm { gamma, beta, hbar, out } => {
                let (gg, gb) = layernorm_pe_grad(g(*out)?, v(*hbar))?;
                vec![(*gamma, gg), (*beta, gb)]
            }
            LayerCache::Attention { weights, x, q, k, v: vnode, h, y } => {
                let xv = v(*x);
                let gs = attention_pe_grad(g(*q)?, g(*k)?, g(*vnode)?, g(*y)?, xv, xv, xv, v(*h))?;
                weights.iter().copied().zip(gs).collect()
            }
            LayerCache::Unsupported { name, .. } => return Err(Error::Capability(name.to_string())),
        })
    }

    /// Per-example squared gradient norm over all of this layer's
    /// parameters: `[τ]`.
    pub fn per_example_sq_norms(&self, tape: &Tape, grads: &GradMap) -> Result<Tensor> {
        match self {
            LayerCache::Linear { x, z, .. } => {
                let (dz, xv) = (retained_grad(grads, *z)?, tape.value(*x));
                if dz.ndim() == 2 {
                    let dz_sq = sq_norm_rows(dz);
                    return sq_norm_rows(xv).mul(&dz_sq)?.add(&dz_sq);
                }
                if dz.ndim() == 3 && xv.ndim() == 3 {
                    return sq_norms_of_products(dz, xv)?.add(&sq_norm_rows(&sum_axis1(dz)));
                }
            }
            LayerCache::Recurrent { lstm, zs, hs, xs, .. } => {
                let dzs = zs.iter().map(|&z| retained_grad(grads, z).cloned()).collect::<Result<Vec<_>>>()?;
                let hv: Vec<Tensor> = hs.iter().map(|&h| tape.value(h).clone()).collect();
                let xv: Vec<Tensor> = xs.iter().map(|&x| tape.value(x).clone()).collect();
                if *lstm {
                    check_lstm_widths(&dzs, &hv)?;
                }
                return rnn_pe_sqnorm(&dzs, &hv, &xv);
            }
            LayerCache::Attention { x, q, k, v, h, y, .. } => {
                let xv = tape.value(*x);
                let mut total = sq_norms_of_products(retained_grad(grads, *y)?, tape.value(*h))?;
                for node in [q, k, v] {
                    total = total.add(&sq_norms_of_products(retained_grad(grads, *node)?, xv)?)?;
                }
                return Ok(total);
            }
            LayerCache::Conv { x, z, geometry, .. } => {
                return conv_pe_sqnorm(retained_grad(grads, *z)?, tape.value(*x), geometry);
            }
            _ => {}
        }
        let mut total: Option<Tensor> = None;
        for (_, g) in self.per_example_grads(tape, grads)? {
            let sq = sq_norm_rows(&g);
            match &mut total {
                Some(t) => t.axpy(1.0, &sq)?,
                None => total = Some(sq),
            }
        }
        total.ok_or_else(|| Error::Contract(format!("{} has no parameters", self.name())))
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Applies `z = x Wᵀ + b` to `[τ, n]` or position-wise to `[τ, s, n]`.
    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let shape = f.tape.shape(x).to_vec();
        if *shape.last().unwrap() != self.in_features || !(2..=3).contains(&shape.len()) {
            return dim_err(format!("linear expects [.., {}], got {shape:?}", self.in_features));
        }
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        let z = if shape.len() == 2 {
            let y = f.tape.matmul(x, w, false, true)?;
            f.tape.add_broadcast(y, b, 1)?
        } else {
            let flat = f.tape.reshape(x, &[shape[0] * shape[1], shape[2]])?;
            let y = f.tape.matmul(flat, w, false, true)?;
            let y = f.tape.reshape(y, &[shape[0], shape[1], self.out_features])?;
            f.tape.add_broadcast(y, b, 2)?
        };
        f.record(LayerCache::Linear { weight: self.weight, bias: self.bias, x, z })?;
        Ok(z)
    }
}

/// Convolution over 2 or 3 spatial axes; kernel `[c_out, c_in, k..]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: PatchGeometry,
}

impl Conv {
    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let shape = f.tape.shape(x).to_vec();
        let nd = self.geometry.kernel.len();
        if shape.len() != nd + 2 || shape[1] != self.in_channels {
            return dim_err(format!("conv expects [τ, {}, {nd} spatial axes], got {shape:?}", self.in_channels));
        }
        let y = f.tape.conv(x, f.param(self.weight), &self.geometry)?;
        let z = f.tape.add_broadcast(y, f.param(self.bias), 1)?;
        f.record(LayerCache::Conv { weight: self.weight, bias: self.bias, x, z, geometry: self.geometry.clone() })?;
        Ok(z)
    }
}

/// Vanilla recurrent layer with `tanh` activation over `[τ, T, n]`,
/// returning the final hidden state `[τ, m]`.
#[derive(Clone, Debug)]
pub struct Rnn {
    pub weight_h: ParamId,
    pub weight_x: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// LSTM layer over `[τ, T, n]` returning the final hidden state.
///
/// The stacked weights hold the gates in the order forget, input,
/// candidate, output: rows `[0, m)` are `W^f`, `[m, 2m)` are `W^i`, and so
/// on.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub weight_h: ParamId,
    pub weight_x: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

fn sequence_shape(f: &Forward, x: NodeId, input: usize, what: &str) -> Result<(usize, usize)> {
    let shape = f.tape.shape(x);
    if shape.len() != 3 || shape[2] != input {
        return dim_err(format!("{what} expects [τ, T, {input}], got {shape:?}"));
    }
    Ok((shape[0], shape[1]))
}

/// `W h + V x + b` for one timestep.
fn recurrent_preact(f: &mut Forward, h: NodeId, xt: NodeId, (w, v, b): (ParamId, ParamId, ParamId)) -> Result<NodeId> {
    let (w, v, b) = (f.param(w), f.param(v), f.param(b));
    let a = f.tape.matmul(h, w, false, true)?;
    let c = f.tape.matmul(xt, v, false, true)?;
    let s = f.tape.add(a, c)?;
    f.tape.add_broadcast(s, b, 1)
}

fn timestep(f: &mut Forward, x: NodeId, t: usize, tau: usize, input: usize) -> Result<NodeId> {
    let xt = f.tape.narrow(x, 1, t, 1)?;
    f.tape.reshape(xt, &[tau, input])
}

impl Rnn {
    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let (tau, steps) = sequence_shape(f, x, self.input, "rnn")?;
        let mut h = f.tape.input(Tensor::zeros(&[tau, self.hidden]));
        let (mut xs, mut hs, mut zs) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..steps {
            let xt = timestep(f, x, t, tau, self.input)?;
            let z = recurrent_preact(f, h, xt, (self.weight_h, self.weight_x, self.bias))?;
            xs.push(xt);
            hs.push(h);
            zs.push(z);
            h = f.tape.tanh(z);
        }
        f.record(LayerCache::Recurrent {
            lstm: false,
            weight_h: self.weight_h,
            weight_x: self.weight_x,
            bias: self.bias,
            xs,
            hs,
            zs,
        })?;
        Ok(h)
    }
}

impl Lstm {
    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let (tau, steps) = sequence_shape(f, x, self.input, "lstm")?;
        let m = self.hidden;
        let mut h = f.tape.input(Tensor::zeros(&[tau, m]));
        let mut c = f.tape.input(Tensor::zeros(&[tau, m]));
        let (mut xs, mut hs, mut zs) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..steps {
            let xt = timestep(f, x, t, tau, self.input)?;
            let z = recurrent_preact(f, h, xt, (self.weight_h, self.weight_x, self.bias))?;
            let gate = |f: &mut Forward, k: usize, act: Unary| -> Result<NodeId> {
                let s = f.tape.narrow(z, 1, k * m, m)?;
                Ok(f.tape.unary(s, act))
            };
            let fg = gate(f, 0, Unary::Sigmoid)?;
            let ig = gate(f, 1, Unary::Sigmoid)?;
            let gg = gate(f, 2, Unary::Tanh)?;
            let og = gate(f, 3, Unary::Sigmoid)?;
            let keep = f.tape.mul(fg, c)?;
            let write = f.tape.mul(ig, gg)?;
            c = f.tape.add(keep, write)?;
            let tc = f.tape.tanh(c);
            xs.push(xt);
            hs.push(h);
            zs.push(z);
            h = f.tape.mul(og, tc)?;
        }
        f.record(LayerCache::Recurrent {
            lstm: true,
            weight_h: self.weight_h,
            weight_x: self.weight_x,
            bias: self.bias,
            xs,
            hs,
            zs,
        })?;
        Ok(h)
    }
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Normalization over the last axis followed by `γ ⊙ h̄ + β`.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub width: usize,
    pub divisor: NormDivisor,
}

impl LayerNorm {
    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let shape = f.tape.shape(x).to_vec();
        if *shape.last().unwrap() != self.width || shape.len() < 2 {
            return dim_err(format!("layernorm expects [.., {}], got {shape:?}", self.width));
        }
        let axis = shape.len() - 1;
        let hbar = f.tape.normalize(x, self.divisor, LAYERNORM_EPS);
        let scaled = f.tape.mul_broadcast(hbar, f.param(self.gamma), axis)?;
        let out = f.tape.add_broadcast(scaled, f.param(self.beta), axis)?;
        f.record(LayerCache::LayerNorm { gamma: self.gamma, beta: self.beta, hbar, out })?;
        Ok(out)
    }
}

/// Where the `1/√d_k` factor is applied relative to the softmax.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionScaling {
    /// `softmax(QKᵀ / √d_k)`.
    #[default]
    Inside,
    /// `softmax(QKᵀ) / √d_k`.
    Outside,
}

/// Multi-head self-attention without biases over `[τ, s, d_m]`.
#[derive(Clone, Debug)]
pub struct Attention {
    /// `W^Q, W^K, W^V, W^O`, each `[d_m, d_m]`.
    pub weights: [ParamId; 4],
    pub d_model: usize,
    pub heads: usize,
    pub scaling: AttentionScaling,
}

impl Attention {
    fn project(&self, f: &mut Forward, x: NodeId, w: ParamId, tau: usize, s: usize) -> Result<NodeId> {
        let d = self.d_model;
        let flat = f.tape.reshape(x, &[tau * s, d])?;
        let y = f.tape.matmul(flat, f.param(w), false, true)?;
        f.tape.reshape(y, &[tau, s, d])
    }

    fn split_heads(&self, f: &mut Forward, x: NodeId, tau: usize, s: usize) -> Result<NodeId> {
        let dk = self.d_model / self.heads;
        let y = f.tape.reshape(x, &[tau, s, self.heads, dk])?;
        let y = f.tape.permute(y, &[0, 2, 1, 3])?;
        f.tape.reshape(y, &[tau * self.heads, s, dk])
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.d_model {
            return dim_err(format!("attention expects [τ, s, {}], got {shape:?}", self.d_model));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return dim_err(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        let (tau, s) = (shape[0], shape[1]);
        let dk = self.d_model / self.heads;
        let [wq, wk, wv, wo] = self.weights;
        let q = self.project(f, x, wq, tau, s)?;
        let k = self.project(f, x, wk, tau, s)?;
        let v = self.project(f, x, wv, tau, s)?;
        let (qh, kh, vh) =
            (self.split_heads(f, q, tau, s)?, self.split_heads(f, k, tau, s)?, self.split_heads(f, v, tau, s)?);
        let scores = f.tape.matmul(qh, kh, false, true)?;
        let factor = 1.0 / (dk as f64).sqrt();
        let weights = match self.scaling {
            AttentionScaling::Inside => {
                let scaled = f.tape.scale(scores, factor);
                f.tape.softmax(scaled)
            }
            AttentionScaling::Outside => {
                let sm = f.tape.softmax(scores);
                f.tape.scale(sm, factor)
            }
        };
        let hh = f.tape.matmul(weights, vh, false, false)?;
        let hh = f.tape.reshape(hh, &[tau, self.heads, s, dk])?;
        let hh = f.tape.permute(hh, &[0, 2, 1, 3])?;
        let h = f.tape.reshape(hh, &[tau, s, self.d_model])?;
        let y = self.project(f, h, wo, tau, s)?;
        f.record(LayerCache::Attention { weights: self.weights, x, q, k, v, h, y })?;
        Ok(y)
    }
}

/// Token embedding with sinusoidal positional encoding; input holds token
/// ids `[τ, s]` stored as floats.
#[derive(Clone, Debug)]
pub struct Embedding {
    /// Frozen `[vocab, d]` table, used when `trainable` is `None`.
    pub table: Arc<Tensor>,
    /// A trainable table parameter instead of the frozen one.
    pub trainable: Option<ParamId>,
    pub positional: bool,
}

pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            pe.data_mut()[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

impl Embedding {
    fn token_ids(&self, x: &Tensor) -> Result<Vec<usize>> {
        let vocab = self.table.dim(0);
        x.data()
            .iter()
            .map(|&v| {
                if v < 0.0 || v.fract() != 0.0 || v as usize >= vocab {
                    Err(Error::Contract(format!("token id {v} outside vocabulary of {vocab}")))
                } else {
                    Ok(v as usize)
                }
            })
            .collect()
    }

    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        let shape = f.tape.shape(x).to_vec();
        if shape.len() != 2 {
            return dim_err(format!("embedding expects token ids [τ, s], got {shape:?}"));
        }
        let (tau, s) = (shape[0], shape[1]);
        let d = self.table.dim(1);
        let ids = self.token_ids(f.tape.value(x))?;
        let pe = self.positional.then(|| positional_encoding(s, d));
        let add_pe = |mut t: Tensor| {
            if let Some(pe) = &pe {
                for block in t.data_mut().chunks_exact_mut(s * d) {
                    block.iter_mut().zip(pe.data()).for_each(|(a, b)| *a += b);
                }
            }
            t
        };
        match self.trainable {
            None => {
                let e = self.table.gather_rows(&ids)?.into_reshape(&[tau, s, d])?;
                Ok(f.tape.input(add_pe(e)))
            }
            Some(p) => {
                let rows = f.tape.gather_rows(f.param(p), &ids)?;
                let e = f.tape.reshape(rows, &[tau, s, d])?;
                f.record(LayerCache::Unsupported { name: "embedding", params: vec![p] })?;
                if pe.is_some() {
                    let c = f.tape.input(add_pe(Tensor::zeros(&[tau, s, d])));
                    f.tape.add(e, c)
                } else {
                    Ok(e)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
}

/// One step of a model's computation.
#[derive(Clone, Debug)]
pub enum Block {
    Linear(Linear),
    Conv(Conv),
    Rnn(Rnn),
    Lstm(Lstm),
    LayerNorm(LayerNorm),
    Attention(Attention),
    Embedding(Embedding),
    Activation(Activation),
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    /// `[τ, ...] -> [τ, prod(...)]`.
    Flatten,
    /// Mean over the sequence axis: `[τ, s, d] -> [τ, d]`.
    MeanOverSequence,
    /// `x + inner(x)`.
    Residual(Vec<Block>),
}

impl Block {
    pub fn forward(&self, f: &mut Forward, x: NodeId) -> Result<NodeId> {
        match self {
            Block::Linear(l) => l.forward(f, x),
            Block::Conv(l) => l.forward(f, x),
            Block::Rnn(l) => l.forward(f, x),
            Block::Lstm(l) => l.forward(f, x),
            Block::LayerNorm(l) => l.forward(f, x),
            Block::Attention(l) => l.forward(f, x),
            Block::Embedding(l) => l.forward(f, x),
            Block::Activation(a) => Ok(match a {
                Activation::Sigmoid => f.tape.sigmoid(x),
                Activation::Tanh => f.tape.tanh(x),
                Activation::Relu => f.tape.relu(x),
                Activation::Softmax => f.tape.softmax(x),
            }),
            Block::MaxPool2d { kernel, stride } => f.tape.max_pool2d(x, *kernel, *stride),
            Block::Flatten => {
                let shape = f.tape.shape(x);
                let (tau, rest) = (shape[0], shape[1..].iter().product());
                f.tape.reshape(x, &[tau, rest])
            }
            Block::MeanOverSequence => f.tape.mean_axis(x, 1),
            Block::Residual(inner) => {
                let mut y = x;
                for b in inner {
                    y = b.forward(f, y)?;
                }
                f.tape.add(x, y)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let dz = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let (gw, gb) = linear_pe_grad(&dz, &x).unwrap();
        assert_eq!(gw.shape(), &[1, 1, 2]);
        assert_eq!(gw.data(), &[3.0, 4.0]);
        assert_eq!(gb.data(), &[1.0]);
        assert_eq!(linear_pe_sqnorm(&dz, &x).unwrap().data(), &[25.0]);
        let (gw, gb) = linear_pe_grad(&Tensor::zeros(&[2, 3]), &x.gather_rows(&[0, 0]).unwrap()).unwrap();
        assert_eq!(gw.max_abs() + gb.max_abs(), 0.0);
        assert!(linear_pe_grad(&dz, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn unit_rows_give_unit_norms() {
        let s = 0.5f64.sqrt();
        let x = Tensor::new(vec![2, 2], vec![s, s, 1.0, 0.0]).unwrap();
        let dz = Tensor::new(vec![2, 3], vec![0.0, 1.0, 0.0, 0.6, 0.0, 0.8]).unwrap();
        for v in linear_pe_sqnorm(&dz, &x).unwrap().data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn goodfellow_identity_matches_materialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dz = random(&[8, 5], &mut rng);
        let x = random(&[8, 7], &mut rng);
        let fast = linear_pe_sqnorm(&dz, &x).unwrap();
        let (gw, _) = linear_pe_grad(&dz, &x).unwrap();
        let slow = sq_norm_rows(&gw);
        assert!(fast.sub(&slow).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn conv_single_pixel_kernel_sums_pixels() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let dz = Tensor::full(&[1, 1, 2, 2], 1.0);
        let (gk, gb) = conv2d_pe_grad(&dz, &x, 1, 1).unwrap();
        assert_eq!(gk.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(gk.data(), &[10.0]);
        assert_eq!(gb.data(), &[4.0]);
        let (gk, _) = conv2d_pe_grad(&Tensor::zeros(&[1, 1, 2, 2]), &x, 1, 1).unwrap();
        assert_eq!(gk.data(), &[0.0]);
        assert!(conv2d_pe_grad(&Tensor::zeros(&[1, 1, 3, 2]), &x, 1, 1).is_err());
    }

    #[test]
    fn conv3d_with_unit_depth_equals_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[3, 2, 5, 6], &mut rng);
        let dz = random(&[3, 4, 4, 4], &mut rng);
        let (g2, b2) = conv2d_pe_grad(&dz, &x, 2, 3).unwrap();
        let x3 = x.reshape(&[3, 2, 1, 5, 6]).unwrap();
        let dz3 = dz.reshape(&[3, 4, 1, 4, 4]).unwrap();
        let (g3, b3) = conv3d_pe_grad(&dz3, &x3, [1, 2, 3]).unwrap();
        assert_eq!(g3.shape(), &[3, 4, 2, 1, 2, 3]);
        assert_eq!(g3.data(), g2.data());
        assert_eq!(b3, b2);
        let (z, _) = conv3d_pe_grad(&Tensor::zeros(&[3, 4, 1, 4, 4]), &x3, [1, 2, 3]).unwrap();
        assert_eq!(z.max_abs(), 0.0);
    }

    #[test]
    fn rnn_single_step_reduces_to_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dz = random(&[4, 3], &mut rng);
        let x = random(&[4, 5], &mut rng);
        let h0 = Tensor::zeros(&[4, 3]);
        let (gw, gv, gb) = rnn_pe_grad(std::slice::from_ref(&dz), &[h0], std::slice::from_ref(&x)).unwrap();
        let (lw, lb) = linear_pe_grad(&dz, &x).unwrap();
        assert_eq!(gw.max_abs(), 0.0);
        assert_eq!(gv, lw);
        assert_eq!(gb, lb);
        let zero = vec![Tensor::zeros(&[4, 3]); 2];
        let (gw, gv, gb) = rnn_pe_grad(&zero, &zero, &[x.clone(), x.clone()]).unwrap();
        assert_eq!(gw.max_abs() + gv.max_abs() + gb.max_abs(), 0.0);
        assert!(rnn_pe_grad(&zero, &zero[..1], &[x.clone(), x]).is_err());
    }

    #[test]
    fn lstm_single_step_reduces_to_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dz = random(&[2, 12], &mut rng);
        let x = random(&[2, 5], &mut rng);
        let (gw, gv, _) =
            lstm_pe_grad(std::slice::from_ref(&dz), &[Tensor::zeros(&[2, 3])], std::slice::from_ref(&x)).unwrap();
        assert_eq!(gw.shape(), &[2, 12, 3]);
        assert_eq!(gw.max_abs(), 0.0);
        assert_eq!(gv, linear_pe_grad(&dz, &x).unwrap().0);
        assert!(lstm_pe_grad(&[dz], &[Tensor::zeros(&[2, 4])], &[x]).is_err());
    }

    #[test]
    fn layernorm_hand_example() {
        // h = [1, 3]: mean 2, std 1, normalized [-1, 1].
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let hbar = tape.normalize(x, NormDivisor::StdDev, 0.0);
        assert_eq!(tape.value(hbar).data(), &[-1.0, 1.0]);
        let dh = Tensor::new(vec![1, 2], vec![2.0, 5.0]).unwrap();
        let (gg, gb) = layernorm_pe_grad(&dh, tape.value(hbar)).unwrap();
        assert_eq!(gg.data(), &[-2.0, 5.0]);
        assert_eq!(gb.data(), &[2.0, 5.0]);
        let (gg, _) = layernorm_pe_grad(&Tensor::zeros(&[1, 2]), tape.value(hbar)).unwrap();
        assert_eq!(gg.max_abs(), 0.0);
        assert!(layernorm_pe_grad(&Tensor::zeros(&[1, 3]), tape.value(hbar)).is_err());
    }

    #[test]
    fn attention_scalar_example() {
        let t = |v: f64| Tensor::new(vec![1, 1, 1], vec![v]).unwrap();
        let gs = attention_pe_grad(&t(2.0), &t(0.0), &t(0.0), &t(0.0), &t(3.0), &t(3.0), &t(3.0), &t(1.0)).unwrap();
        assert_eq!(gs[0].data(), &[6.0]);
        assert_eq!(gs[1].data(), &[0.0]);
    }

    #[test]
    fn attention_grad_matches_column_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (tau, s, d) = (3, 4, 5);
        let dq = random(&[tau, s, d], &mut rng);
        let qin = random(&[tau, s, d], &mut rng);
        let gs = attention_pe_grad(&dq, &dq, &dq, &dq, &qin, &qin, &qin, &qin).unwrap();
        for b in 0..tau {
            for i in 0..d {
                for j in 0..d {
                    let mut ip = 0.0;
                    for k in 0..s {
                        ip += dq.data()[(b * s + k) * d + i] * qin.data()[(b * s + k) * d + j];
                    }
                    assert!((gs[0].data()[(b * d + i) * d + j] - ip).abs() < 1e-12);
                }
            }
        }
    }

    fn params_from(shapes: &[&[usize]], rng: &mut ChaCha8Rng) -> Vec<Param> {
        shapes
            .iter()
            .enumerate()
            .map(|(i, s)| Param { name: format!("p{i}"), value: Arc::new(random(s, rng)), group: 0 })
            .collect()
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let params = vec![
            Param { name: "w".into(), value: Arc::new(eye), group: 0 },
            Param { name: "b".into(), value: Arc::new(Tensor::zeros(&[3])), group: 0 },
        ];
        let layer = Linear { weight: ParamId(0), bias: ParamId(1), in_features: 3, out_features: 3 };
        let mut f = Forward::new(&params, true);
        let x0 = random(&[2, 3], &mut ChaCha8Rng::seed_from_u64(6));
        let x = f.tape.input(x0.clone());
        let z = layer.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.value(z), &x0);
        assert_eq!(f.caches.len(), 1);
        assert!(f.tape.is_retained(z));
    }

    #[test]
    fn no_cache_without_retention() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = params_from(&[&[2, 3], &[2]], &mut rng);
        let layer = Linear { weight: ParamId(0), bias: ParamId(1), in_features: 3, out_features: 2 };
        let mut f = Forward::new(&params, false);
        let x = f.tape.input(random(&[4, 3], &mut rng));
        let z = layer.forward(&mut f, x).unwrap();
        assert!(f.caches.is_empty());
        assert!(!f.tape.is_retained(z));
        let bad = f.tape.input(random(&[4, 2], &mut rng));
        assert!(layer.forward(&mut f, bad).is_err());
    }

    #[test]
    fn single_key_attention_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = params_from(&[&[4, 4], &[4, 4], &[4, 4], &[4, 4]], &mut rng);
        let att = Attention {
            weights: [ParamId(0), ParamId(1), ParamId(2), ParamId(3)],
            d_model: 4,
            heads: 2,
            scaling: AttentionScaling::Inside,
        };
        let mut f = Forward::new(&params, true);
        let x = f.tape.input(random(&[3, 1, 4], &mut rng));
        att.forward(&mut f, x).unwrap();
        let LayerCache::Attention { v, h, .. } = f.caches[0].clone() else { panic!() };
        assert!(f.tape.value(h).sub(f.tape.value(v)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn trainable_embedding_is_unsupported() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = params_from(&[&[10, 4]], &mut rng);
        let emb = Embedding { table: Arc::new(Tensor::zeros(&[10, 4])), trainable: Some(ParamId(0)), positional: true };
        let mut f = Forward::new(&params, true);
        let x = f.tape.input(Tensor::new(vec![1, 3], vec![1.0, 9.0, 2.0]).unwrap());
        emb.forward(&mut f, x).unwrap();
        let grads = GradMap::default();
        let err = f.caches[0].per_example_grads(&f.tape, &grads).unwrap_err();
        assert!(matches!(err, Error::Capability(ref n) if n == "embedding"));
        let bad = f.tape.input(Tensor::new(vec![1, 1], vec![10.0]).unwrap());
        assert!(emb.forward(&mut f, bad).is_err());
    }
}
