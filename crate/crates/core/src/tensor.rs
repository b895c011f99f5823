//! Dense row-major `f64` tensors and the kernels the per-example gradient
//! formulas reduce to: batched matrix multiply, outer products, im2col and
//! row-wise squared norms.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{dim_err, Error, Result};

/// Batch sizes below this run kernels on the calling thread.
const PAR_BATCH_MIN: usize = 8;

/// Dense tensor of 64-bit floats stored contiguously in row-major order.
///
/// Every extent is at least one and the element count always equals the
/// product of the shape.
///
/// Clones share storage; writing through [`Tensor::data_mut`] copies first
/// if the storage is shared.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return dim_err("tensor must have at least one axis");
    }
    if shape.contains(&0) {
        return dim_err(format!("zero extent in shape {shape:?}"));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return dim_err(format!("shape {shape:?} holds {n} elements but {} were given", data.len()));
        }
        Ok(Self { shape, data: Arc::new(data) })
    }

    /// Panics on an invalid shape; for internal construction from
    /// already-validated extents.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    /// One-element tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return dim_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return dim_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&v| f(v)).collect()) }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return dim_err(format!("shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("shapes {:?} and {:?} differ", self.shape, other.shape));
        }
        for (a, &b) in self.data_mut().iter_mut().zip(other.data.iter()) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.sq_norm().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Number of elements per leading-axis slice.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    /// Rows `[start, start + len)` along the leading axis.
    pub fn rows(&self, start: usize, len: usize) -> Result<Self> {
        self.narrow(0, start, len)
    }

    /// Gathers leading-axis slices in the given order.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return dim_err("gather_rows with no indices");
        }
        let row = self.row_len();
        let mut data = Vec::with_capacity(row * indices.len());
        for &i in indices {
            if i >= self.shape[0] {
                return dim_err(format!("row {i} out of range for {:?}", self.shape));
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self::from_parts(shape, data))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || len == 0 || start + len > self.shape[axis] {
            return dim_err(format!("narrow(axis={axis}, start={start}, len={len}) out of range for {:?}", self.shape));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_parts(shape, data))
    }

    /// Inverse of [`Tensor::narrow`]: places `self` into a zero tensor of
    /// extent `full` along `axis`.
    pub(crate) fn unnarrow(&self, axis: usize, start: usize, full: usize) -> Self {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let mut shape = self.shape.clone();
        shape[axis] = full;
        let mut out = Tensor::zeros(&shape);
        for o in 0..outer {
            let dst = (o * full + start) * inner;
            let src = o * len * inner;
            out.data_mut()[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        out
    }

    /// Reorders axes; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("invalid permutation {perm:?} for {:?}", self.shape));
        }
        let mut src_strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            src_strides[i] = src_strides[i + 1] * self.shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        // Keeping the last axis in place lets whole rows be copied.
        let (run, outer) = if perm[nd - 1] == nd - 1 { (self.shape[nd - 1], nd - 1) } else { (1, nd) };
        let mut data = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; nd];
        let mut offset = 0usize;
        for _ in 0..self.data.len() / run {
            data.extend_from_slice(&self.data[offset..offset + run]);
            for ax in (0..outer).rev() {
                idx[ax] += 1;
                offset += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self::from_parts(out_shape, data))
    }

    /// Sum over the leading axis.
    pub fn sum_rows(&self) -> Tensor {
        let row = self.row_len();
        let mut out = vec![0.0; row];
        for chunk in self.data.chunks_exact(row) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        let shape = if self.ndim() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Tensor::from_parts(shape, out)
    }
}

/// Row-major GEMM `c = beta * c + op(a) * op(b)` with `op(a)` of shape
/// `[m, k]` and `op(b)` of shape `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn logical_dims(rows: usize, cols: usize, transposed: bool) -> (usize, usize) {
    if transposed {
        (cols, rows)
    } else {
        (rows, cols)
    }
}

/// Matrix product of `op(a)` and `op(b)`.
///
/// Accepts two 2-D operands or two 3-D operands with equal leading (batch)
/// extent; `ta`/`tb` transpose the trailing two axes.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    match (a.ndim(), b.ndim()) {
        (2, 2) => {
            let (m, k) = logical_dims(a.shape[0], a.shape[1], ta);
            let (k2, n) = logical_dims(b.shape[0], b.shape[1], tb);
            if k != k2 {
                return dim_err(format!(
                    "matmul inner extents differ: {:?}{} x {:?}{}",
                    a.shape,
                    if ta { "ᵀ" } else { "" },
                    b.shape,
                    if tb { "ᵀ" } else { "" }
                ));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &a.data, ta, &b.data, tb, &mut out, 0.0);
            Ok(Tensor::from_parts(vec![m, n], out))
        }
        (3, 3) => batched(a, b, ta, tb),
        _ => dim_err(format!("matmul needs 2-D or 3-D operands, got {:?} and {:?}", a.shape, b.shape)),
    }
}

fn batched(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    let batch = a.shape[0];
    let (m, k) = logical_dims(a.shape[1], a.shape[2], ta);
    let (k2, n) = logical_dims(b.shape[1], b.shape[2], tb);
    if b.shape[0] != batch || k != k2 {
        return dim_err(format!("bmm shapes do not conform: {:?} and {:?}", a.shape, b.shape));
    }
    let (sa, sb, sc) = (m * k, k * n, m * n);
    let mut out = vec![0.0; batch * sc];
    let kernel = |(i, c): (usize, &mut [f64])| {
        gemm(m, k, n, &a.data[i * sa..(i + 1) * sa], ta, &b.data[i * sb..(i + 1) * sb], tb, c, 0.0);
    };
    if batch >= PAR_BATCH_MIN {
        out.par_chunks_mut(sc).enumerate().for_each(kernel);
    } else {
        out.chunks_mut(sc).enumerate().for_each(kernel);
    }
    Ok(Tensor::from_parts(vec![batch, m, n], out))
}

/// Batched matrix multiply: `out[i] = a[i] · b[i]`.
pub fn bmm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 3 || b.ndim() != 3 {
        return dim_err(format!("bmm needs 3-D operands, got {:?} and {:?}", a.shape, b.shape));
    }
    batched(a, b, false, false)
}

/// Batched outer product: `out[i] = u[i] ⊗ v[i]`, computed as a `bmm` of
/// `[τ, m, 1]` by `[τ, 1, n]`.
pub fn outer_batch(u: &Tensor, v: &Tensor) -> Result<Tensor> {
    if u.ndim() != 2 || v.ndim() != 2 || u.shape[0] != v.shape[0] {
        return dim_err(format!("outer_batch needs [τ,m] and [τ,n], got {:?} and {:?}", u.shape, v.shape));
    }
    let (tau, m, n) = (u.shape[0], u.shape[1], v.shape[1]);
    bmm(&u.reshape(&[tau, m, 1])?, &v.reshape(&[tau, 1, n])?)
}

/// Per-row squared L2 norm over all trailing axes: `[τ, ...] -> [τ]`.
pub fn sq_norm_rows(x: &Tensor) -> Tensor {
    let row = x.row_len();
    let data = x.data.chunks_exact(row).map(|r| r.iter().map(|v| v * v).sum()).collect();
    Tensor::from_parts(vec![x.shape[0]], data)
}

/// Squared Frobenius norms of `a[i]ᵀ b[i]` for `a: [τ, T, p]` and
/// `b: [τ, T, q]`, without forming the `[τ, p, q]` products when the
/// `T × T` Gram matrices are cheaper: `‖aᵀb‖² = ⟨a aᵀ, b bᵀ⟩`.
pub fn sq_norms_of_products(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.ndim() != 3 || b.ndim() != 3 || a.shape[..2] != b.shape[..2] {
        return dim_err(format!(
            "sq_norms_of_products needs [τ, T, p] and [τ, T, q], got {:?} and {:?}",
            a.shape, b.shape
        ));
    }
    let (tau, t, p, q) = (a.shape[0], a.shape[1], a.shape[2], b.shape[2]);
    let gram = t * (p + q) < p * q;
    let scratch = if gram { 2 * t * t } else { p * q };
    let norms = (0..tau)
        .into_par_iter()
        .map_init(
            || vec![0.0; scratch],
            |buf, i| {
                let (ai, bi) = (&a.data[i * t * p..(i + 1) * t * p], &b.data[i * t * q..(i + 1) * t * q]);
                if gram {
                    let (ga, gb) = buf.split_at_mut(t * t);
                    gemm(t, p, t, ai, false, ai, true, ga, 0.0);
                    gemm(t, q, t, bi, false, bi, true, gb, 0.0);
                    ga.iter().zip(gb.iter()).map(|(x, y)| x * y).sum::<f64>()
                } else {
                    gemm(p, t, q, ai, true, bi, false, buf, 0.0);
                    buf.iter().map(|v| v * v).sum()
                }
            },
        )
        .collect();
    Ok(Tensor::from_parts(vec![tau], norms))
}

/// Receptive-field geometry for im2col over `d` spatial axes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub kernel: Vec<usize>,
    pub stride: usize,
    /// Zero padding added on both sides of every spatial axis.
    pub padding: usize,
}

impl PatchGeometry {
    pub fn new(kernel: &[usize], stride: usize) -> Self {
        Self { kernel: kernel.to_vec(), stride, padding: 0 }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Output spatial extents for the given input spatial extents.
    pub fn output_extents(&self, spatial: &[usize]) -> Result<Vec<usize>> {
        if spatial.len() != self.kernel.len() {
            return dim_err(format!("kernel {:?} does not match {} spatial axes", self.kernel, spatial.len()));
        }
        if self.stride == 0 || self.kernel.contains(&0) {
            return dim_err("kernel extents and stride must be positive");
        }
        spatial
            .iter()
            .zip(&self.kernel)
            .map(|(&s, &k)| {
                let padded = s + 2 * self.padding;
                if padded < k {
                    dim_err(format!("kernel {:?} larger than input {spatial:?}", self.kernel))
                } else {
                    Ok((padded - k) / self.stride + 1)
                }
            })
            .collect()
    }
}

struct PatchPlan {
    batch: usize,
    channels: usize,
    padded: Vec<usize>,
    /// Offset of every patch origin inside one padded image.
    origins: Vec<usize>,
    /// Offset of every patch element relative to its origin.
    deltas: Vec<usize>,
}

impl PatchPlan {
    fn new(shape: &[usize], g: &PatchGeometry) -> Result<Self> {
        let nd = g.kernel.len();
        if shape.len() != nd + 2 {
            return dim_err(format!("im2col over {nd} spatial axes needs a rank-{} input, got {shape:?}", nd + 2));
        }
        let out = g.output_extents(&shape[2..])?;
        let padded: Vec<usize> = shape[2..].iter().map(|s| s + 2 * g.padding).collect();
        let mut strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * padded[i + 1];
        }
        let plane: usize = padded.iter().product();
        let origins = odometer(&out).map(|idx| idx.iter().zip(&strides).map(|(i, s)| i * g.stride * s).sum()).collect();
        let mut deltas = Vec::new();
        for c in 0..shape[1] {
            for idx in odometer(&g.kernel) {
                deltas.push(c * plane + idx.iter().zip(&strides).map(|(i, s)| i * s).sum::<usize>());
            }
        }
        Ok(Self { batch: shape[0], channels: shape[1], padded, origins, deltas })
    }

    fn image_len(&self) -> usize {
        self.channels * self.padded.iter().product::<usize>()
    }

    fn padded_shape(&self, batch: usize) -> Vec<usize> {
        let mut shape = vec![batch, self.channels];
        shape.extend_from_slice(&self.padded);
        shape
    }
}

/// Row-major enumeration of all indices inside `extents`.
fn odometer(extents: &[usize]) -> impl Iterator<Item = Vec<usize>> + '_ {
    let total: usize = extents.iter().product();
    (0..total).map(move |mut flat| {
        let mut idx = vec![0; extents.len()];
        for ax in (0..extents.len()).rev() {
            idx[ax] = flat % extents[ax];
            flat /= extents[ax];
        }
        idx
    })
}

fn pad_spatial(x: &Tensor, padding: usize) -> Tensor {
    if padding == 0 {
        return x.clone();
    }
    let nd = x.ndim() - 2;
    let mut shape = x.shape.clone();
    for s in &mut shape[2..] {
        *s += 2 * padding;
    }
    let mut out = Tensor::zeros(&shape);
    let src_spatial = &x.shape[2..];
    let planes = x.shape[0] * x.shape[1];
    let src_plane: usize = src_spatial.iter().product();
    let dst_plane: usize = shape[2..].iter().product();
    let mut dst_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        dst_strides[i] = dst_strides[i + 1] * shape[3 + i];
    }
    for (s, idx) in odometer(src_spatial).enumerate() {
        let d: usize = idx.iter().zip(&dst_strides).map(|(i, st)| (i + padding) * st).sum();
        for p in 0..planes {
            out.data_mut()[p * dst_plane + d] = x.data[p * src_plane + s];
        }
    }
    out
}

fn crop_spatial(x: &Tensor, padding: usize, original: &[usize]) -> Tensor {
    if padding == 0 {
        return x.clone();
    }
    let nd = x.ndim() - 2;
    let mut out = Tensor::zeros(original);
    let planes = original[0] * original[1];
    let dst_plane: usize = original[2..].iter().product();
    let src_plane: usize = x.shape[2..].iter().product();
    let mut src_strides = vec![1usize; nd];
    for i in (0..nd - 1).rev() {
        src_strides[i] = src_strides[i + 1] * x.shape[3 + i];
    }
    for (d, idx) in odometer(&original[2..]).enumerate() {
        let s: usize = idx.iter().zip(&src_strides).map(|(i, st)| (i + padding) * st).sum();
        for p in 0..planes {
            out.data_mut()[p * dst_plane + d] = x.data[p * src_plane + s];
        }
    }
    out
}

/// Lays out receptive-field patches as rows.
///
/// Input `[τ, c_in, S_1, .., S_d]`, output `[τ, P, c_in·k_1···k_d]` where `P`
/// counts output positions in row-major order. Within a row, elements are
/// ordered channel-major, then row-major over the kernel window, which is
/// the flattening order of a `[c_out, c_in, k_1, .., k_d]` kernel.
pub fn im2col_nd(x: &Tensor, g: &PatchGeometry) -> Result<Tensor> {
    let plan = PatchPlan::new(&x.shape, g)?;
    let src = pad_spatial(x, g.padding);
    let (p, k) = (plan.origins.len(), plan.deltas.len());
    let img = plan.image_len();
    let mut out = vec![0.0; plan.batch * p * k];
    let fill = |(b, rows): (usize, &mut [f64])| {
        let image = &src.data[b * img..(b + 1) * img];
        for (row, &origin) in rows.chunks_exact_mut(k).zip(&plan.origins) {
            for (o, &d) in row.iter_mut().zip(&plan.deltas) {
                *o = image[origin + d];
            }
        }
    };
    if plan.batch >= PAR_BATCH_MIN {
        out.par_chunks_mut(p * k).enumerate().for_each(fill);
    } else {
        out.chunks_mut(p * k).enumerate().for_each(fill);
    }
    Ok(Tensor::from_parts(vec![plan.batch, p, k], out))
}

/// Adjoint of [`im2col_nd`]: scatter-adds patch rows back onto an image of
/// shape `input_shape`.
pub fn col2im_nd(cols: &Tensor, input_shape: &[usize], g: &PatchGeometry) -> Result<Tensor> {
    let plan = PatchPlan::new(input_shape, g)?;
    let (p, k) = (plan.origins.len(), plan.deltas.len());
    if cols.shape != [plan.batch, p, k] {
        return dim_err(format!("col2im expects [{}, {p}, {k}], got {:?}", plan.batch, cols.shape));
    }
    let img = plan.image_len();
    let mut padded_shape = input_shape.to_vec();
    for s in &mut padded_shape[2..] {
        *s += 2 * g.padding;
    }
    let mut out = vec![0.0; plan.batch * img];
    let scatter = |(b, image): (usize, &mut [f64])| {
        let rows = &cols.data[b * p * k..(b + 1) * p * k];
        for (row, &origin) in rows.chunks_exact(k).zip(&plan.origins) {
            for (v, &d) in row.iter().zip(&plan.deltas) {
                image[origin + d] += v;
            }
        }
    };
    if plan.batch >= PAR_BATCH_MIN {
        out.par_chunks_mut(img).enumerate().for_each(scatter);
    } else {
        out.chunks_mut(img).enumerate().for_each(scatter);
    }
    Ok(crop_spatial(&Tensor::from_parts(padded_shape, out), g.padding, input_shape))
}

/// 2-D im2col of `[τ, c_in, s_H, s_W]` with a `κ_h × κ_w` window.
pub fn im2col(x: &Tensor, kh: usize, kw: usize, stride: usize) -> Result<Tensor> {
    if x.ndim() != 4 {
        return dim_err(format!("im2col needs [τ, c, H, W], got {:?}", x.shape));
    }
    im2col_nd(x, &PatchGeometry::new(&[kh, kw], stride))
}

/// Shapes of a direct convolution: patches per record `p`, patch length
/// `k`, output channels and the plan over the padded input.
struct ConvPlan {
    plan: PatchPlan,
    p: usize,
    k: usize,
    c_out: usize,
    out_shape: Vec<usize>,
}

impl ConvPlan {
    fn new(x: &[usize], w: &[usize], g: &PatchGeometry) -> Result<Self> {
        let nd = g.kernel.len();
        if x.len() != nd + 2 || w.len() != nd + 2 || w[1] != x[1] || w[2..] != g.kernel[..] {
            return dim_err(format!("convolution of {x:?} with kernel {w:?} over {nd} spatial axes"));
        }
        let mut padded = x.to_vec();
        for s in &mut padded[2..] {
            *s += 2 * g.padding;
        }
        let plan = PatchPlan::new(&padded, &PatchGeometry::new(&g.kernel, g.stride))?;
        let mut out_shape = vec![x[0], w[0]];
        out_shape.extend(g.output_extents(&x[2..])?);
        Ok(Self { p: plan.origins.len(), k: plan.deltas.len(), c_out: w[0], plan, out_shape })
    }

    fn fill(&self, image: &[f64], cols: &mut [f64]) {
        for (row, &origin) in cols.chunks_exact_mut(self.k).zip(&self.plan.origins) {
            for (o, &d) in row.iter_mut().zip(&self.plan.deltas) {
                *o = image[origin + d];
            }
        }
    }

    fn scatter(&self, cols: &[f64], image: &mut [f64]) {
        for (row, &origin) in cols.chunks_exact(self.k).zip(&self.plan.origins) {
            for (v, &d) in row.iter().zip(&self.plan.deltas) {
                image[origin + d] += v;
            }
        }
    }
}

/// Direct convolution (cross-correlation) of `x: [τ, c_in, S_1..S_d]` with
/// `w: [c_out, c_in, k_1..k_d]`, giving `[τ, c_out, O_1..O_d]`.
///
/// Equals `im2col(x) · reshape(w, [c_out, K])ᵀ` per record, but forms the
/// patch matrix of one record at a time.
pub fn conv_nd(x: &Tensor, w: &Tensor, g: &PatchGeometry) -> Result<Tensor> {
    let cp = ConvPlan::new(&x.shape, &w.shape, g)?;
    let src = pad_spatial(x, g.padding);
    let img = cp.plan.image_len();
    let (p, k, c_out) = (cp.p, cp.k, cp.c_out);
    let mut out = vec![0.0; cp.out_shape.iter().product()];
    out.par_chunks_mut(c_out * p).enumerate().for_each_init(
        || vec![0.0; p * k],
        |cols, (i, y)| {
            cp.fill(&src.data[i * img..(i + 1) * img], cols);
            gemm(c_out, k, p, &w.data, false, cols, true, y, 0.0);
        },
    );
    Ok(Tensor::from_parts(cp.out_shape, out))
}

/// Gradients of [`conv_nd`] with respect to its input and its kernel, each
/// computed only when asked for.
pub fn conv_nd_backward(
    dy: &Tensor,
    x: &Tensor,
    w: &Tensor,
    g: &PatchGeometry,
    want_dx: bool,
    want_dw: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let cp = ConvPlan::new(&x.shape, &w.shape, g)?;
    if dy.shape != cp.out_shape {
        return dim_err(format!("conv gradient {:?} does not match output {:?}", dy.shape, cp.out_shape));
    }
    let src = pad_spatial(x, g.padding);
    let img = cp.plan.image_len();
    let (p, k, c_out) = (cp.p, cp.k, cp.c_out);
    let record = |i: usize, cols: &mut Vec<f64>, dx: Option<&mut [f64]>, dw: &mut Vec<f64>| {
        let dyi = &dy.data[i * c_out * p..(i + 1) * c_out * p];
        if want_dw {
            cp.fill(&src.data[i * img..(i + 1) * img], cols);
            gemm(c_out, p, k, dyi, false, cols, false, dw, 1.0);
        }
        if let Some(dx) = dx {
            gemm(p, c_out, k, dyi, true, &w.data, false, cols, 0.0);
            cp.scatter(cols, dx);
        }
    };
    // Fixed blocks of records, summed in order, keep the kernel gradient
    // independent of the thread count.
    const BLOCK: usize = 8;
    let tau = x.shape[0];
    let kernel_len = if want_dw { w.len() } else { 0 };
    let block = |b: usize, dxb: Option<&mut [f64]>| {
        let (mut cols, mut dw) = (vec![0.0; p * k], vec![0.0; kernel_len]);
        let records = b * BLOCK..((b + 1) * BLOCK).min(tau);
        match dxb {
            Some(dxb) => {
                for (i, dxi) in records.zip(dxb.chunks_exact_mut(img)) {
                    record(i, &mut cols, Some(dxi), &mut dw);
                }
            }
            None => records.for_each(|i| record(i, &mut cols, None, &mut dw)),
        }
        dw
    };
    let mut dx = if want_dx { vec![0.0; tau * img] } else { Vec::new() };
    let partials: Vec<Vec<f64>> = if want_dx {
        dx.par_chunks_mut(BLOCK * img).enumerate().map(|(b, dxb)| block(b, Some(dxb))).collect()
    } else {
        (0..tau.div_ceil(BLOCK)).into_par_iter().map(|b| block(b, None)).collect()
    };
    let dw = partials.into_iter().reduce(|mut a, b| {
        a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        a
    });
    let dw = dw.unwrap_or_default();
    let dx = want_dx.then(|| {
        let padded = Tensor::from_parts(cp.plan.padded_shape(tau), dx);
        crop_spatial(&padded, g.padding, &x.shape)
    });
    let dw = want_dw.then(|| Tensor::from_parts(w.shape.clone(), dw));
    Ok((dx, dw))
}

/// Per-record kernel gradients of [`conv_nd`]: `[τ, c_out, c_in·k_1···k_d]`
/// with record `i` equal to `dy[i] · im2col(x)[i]`.
pub fn conv_nd_record_grads(dy: &Tensor, x: &Tensor, g: &PatchGeometry) -> Result<Tensor> {
    let (cp, src) = record_plan(dy, x, g)?;
    let img = cp.plan.image_len();
    let (p, k, c_out) = (cp.p, cp.k, cp.c_out);
    let mut out = vec![0.0; x.shape[0] * c_out * k];
    out.par_chunks_mut(c_out * k).enumerate().for_each_init(
        || vec![0.0; p * k],
        |cols, (i, gi)| {
            cp.fill(&src.data[i * img..(i + 1) * img], cols);
            gemm(c_out, p, k, &dy.data[i * c_out * p..(i + 1) * c_out * p], false, cols, false, gi, 0.0);
        },
    );
    Ok(Tensor::from_parts(vec![x.shape[0], c_out, k], out))
}

/// Squared Frobenius norms of the per-record kernel gradients, `[τ]`,
/// without keeping more than one record's gradient at a time.
pub fn conv_nd_record_sq_norms(dy: &Tensor, x: &Tensor, g: &PatchGeometry) -> Result<Tensor> {
    let (cp, src) = record_plan(dy, x, g)?;
    let img = cp.plan.image_len();
    let (p, k, c_out) = (cp.p, cp.k, cp.c_out);
    let norms = (0..x.shape[0])
        .into_par_iter()
        .map_init(
            || (vec![0.0; p * k], vec![0.0; c_out * k]),
            |(cols, gi), i| {
                cp.fill(&src.data[i * img..(i + 1) * img], cols);
                gemm(c_out, p, k, &dy.data[i * c_out * p..(i + 1) * c_out * p], false, cols, false, gi, 0.0);
                gi.iter().map(|v| v * v).sum()
            },
        )
        .collect();
    Ok(Tensor::from_parts(vec![x.shape[0]], norms))
}

fn record_plan(dy: &Tensor, x: &Tensor, g: &PatchGeometry) -> Result<(ConvPlan, Tensor)> {
    if dy.ndim() != x.ndim() || dy.ndim() < 3 || dy.shape[0] != x.shape[0] {
        return dim_err(format!("per-record conv gradients of dy {:?} and x {:?}", dy.shape, x.shape));
    }
    let mut w = vec![dy.shape[1], x.shape[1]];
    w.extend_from_slice(&g.kernel);
    let cp = ConvPlan::new(&x.shape, &w, g)?;
    if dy.shape != cp.out_shape {
        return dim_err(format!("dy {:?} does not match conv output {:?}", dy.shape, cp.out_shape));
    }
    Ok((cp, pad_spatial(x, g.padding)))
}

impl From<Tensor> for Vec<f64> {
    fn from(t: Tensor) -> Self {
        t.into_data()
    }
}

impl TryFrom<(Vec<usize>, Vec<f64>)> for Tensor {
    type Error = Error;

    fn try_from((shape, data): (Vec<usize>, Vec<f64>)) -> Result<Self> {
        Tensor::new(shape, data)
    }
}
