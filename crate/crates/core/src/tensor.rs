//! Dense row-major `f32` tensors and the handful of kernels the transformer
//! layers are built from.
//!
//! Storage is 32-bit; every reduction (dot products, means, variances, norms)
//! accumulates in 64-bit. Backward passes are written by hand and checked
//! against [`finite_diff_grad`].

use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} hold {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f32) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self {
            dims: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim().max(1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Squared L2 norm accumulated in f64.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims.len() != 2 || b.dims.len() != 2 {
        return Err(Error::Shape(format!(
            "matmul needs 2-D operands, got {:?} and {:?}",
            a.dims, b.dims
        )));
    }
    let (m, k) = (a.dims[0], a.dims[1]);
    let (k2, n) = (b.dims[0], b.dims[1]);
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dims {:?} · {:?}",
            a.dims, b.dims
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(&a.data, &b.data, m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// `out[m×n] = a[m×k] · b[k×n]`, f64 accumulation.
pub fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let aip = aip as f64;
            let b_row = &b[p * n..(p + 1) * n];
            for (acc_j, &bpj) in acc.iter_mut().zip(b_row) {
                *acc_j += aip * bpj as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]` (weight gradients).
pub fn gemm_at_b_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let mut acc = vec![0f64; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let aip = aip as f64;
            for (acc_j, &bij) in acc[p * n..(p + 1) * n].iter_mut().zip(b_row) {
                *acc_j += aip * bij as f64;
            }
        }
    }
    for (o, v) in out.iter_mut().zip(acc) {
        *o = (*o as f64 + v) as f32;
    }
}

/// `out[m×k] = a[m×n] · b[k×n]ᵀ` (input gradients).
pub fn gemm_a_bt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            out[i * k + p] = dot(a_row, &b[p * n..(p + 1) * n]) as f32;
        }
    }
}

/// Dot product with four independent f64 accumulators.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = [0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            s[l] += x[l] as f64 * y[l] as f64;
        }
    }
    let mut tail = 0f64;
    for (x, y) in ra.iter().zip(rb) {
        tail += *x as f64 * *y as f64;
    }
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// Adds `bias` to every row of `x` (row length = `bias.len()`).
pub fn add_row_bias(x: &mut [f32], bias: &[f32]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Accumulates column sums of `dy` into `out` (bias gradients).
pub fn col_sum_acc(dy: &[f32], cols: usize, out: &mut [f32]) {
    let mut acc = vec![0f64; cols];
    for row in dy.chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v as f64;
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = (*o as f64 + a) as f32;
    }
}

/// Softmax along `axis` with max subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.dims.len() {
        return Err(Error::Shape(format!("softmax axis {axis} on {:?}", x.dims)));
    }
    let len = x.dims[axis];
    let inner: usize = x.dims[axis + 1..].iter().product();
    let outer: usize = x.dims[..axis].iter().product();
    let mut out = x.data.clone();
    let mut buf = vec![0f64; len];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len)
                .map(|j| x.data[idx(j)])
                .fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0f64;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = (x.data[idx(j)] as f64 - max).exp();
                sum += *b;
            }
            for (j, b) in buf.iter().enumerate() {
                out[idx(j)] = (b / sum) as f32;
            }
        }
    }
    Tensor::new(x.dims.clone(), out)
}

/// In-place softmax of one contiguous row.
pub fn softmax_row(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let mut sum = 0f64;
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| {
            let e = (v as f64 - max).exp();
            sum += e;
            e
        })
        .collect();
    for (r, e) in row.iter_mut().zip(exps) {
        *r = (e / sum) as f32;
    }
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad_f64(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// Exact (erf) Gaussian-error linear unit.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| gelu_f64(v as f64) as f32)
}

pub fn gelu_slice(x: &[f32], out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = gelu_f64(v as f64) as f32;
    }
}

/// `dx = dy * gelu'(x)`, in place over `dy`.
pub fn gelu_backward_inplace(x: &[f32], dy: &mut [f32]) {
    for (g, &v) in dy.iter_mut().zip(x) {
        *g = (*g as f64 * gelu_grad_f64(v as f64)) as f32;
    }
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct LnCache {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Layer norm over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let h = x.last_dim();
    if gamma.len() != h || beta.len() != h {
        return Err(Error::Shape(format!(
            "layer_norm affine params {} / {} vs last dim {h}",
            gamma.len(),
            beta.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    layer_norm_rows(&x.data, &gamma.data, &beta.data, eps, &mut out);
    Tensor::new(x.dims.clone(), out)
}

pub fn layer_norm_rows(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    out: &mut [f32],
) -> LnCache {
    let h = gamma.len();
    let rows = x.len() / h;
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * h..(r + 1) * h];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / h as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / h as f64;
        let istd = 1.0 / (var + eps as f64).sqrt();
        inv_std[r] = istd as f32;
        for j in 0..h {
            let xh = ((row[j] as f64 - mean) * istd) as f32;
            xhat[r * h + j] = xh;
            out[r * h + j] = xh * gamma[j] + beta[j];
        }
    }
    LnCache { xhat, inv_std }
}

/// Returns `dx`; accumulates `dgamma`/`dbeta` when given.
pub fn layer_norm_backward(
    cache: &LnCache,
    gamma: &[f32],
    dy: &[f32],
    dgamma: Option<&mut [f32]>,
    dbeta: Option<&mut [f32]>,
) -> Vec<f32> {
    let h = gamma.len();
    let rows = dy.len() / h;
    let mut dx = vec![0.0; dy.len()];
    let mut dg = vec![0f64; h];
    let mut db = vec![0f64; h];
    for r in 0..rows {
        let xh = &cache.xhat[r * h..(r + 1) * h];
        let g = &dy[r * h..(r + 1) * h];
        let mut sum_dxh = 0f64;
        let mut sum_dxh_xh = 0f64;
        for j in 0..h {
            let dxh = g[j] as f64 * gamma[j] as f64;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j] as f64;
            dg[j] += g[j] as f64 * xh[j] as f64;
            db[j] += g[j] as f64;
        }
        let istd = cache.inv_std[r] as f64;
        let hn = h as f64;
        for j in 0..h {
            let dxh = g[j] as f64 * gamma[j] as f64;
            dx[r * h + j] = (istd / hn * (hn * dxh - sum_dxh - xh[j] as f64 * sum_dxh_xh)) as f32;
        }
    }
    if let Some(out) = dgamma {
        for (o, v) in out.iter_mut().zip(&dg) {
            *o = (*o as f64 + v) as f32;
        }
    }
    if let Some(out) = dbeta {
        for (o, v) in out.iter_mut().zip(&db) {
            *o = (*o as f64 + v) as f32;
        }
    }
    dx
}

/// Mean softmax cross-entropy over a `[batch × classes]` logit matrix.
///
/// Returns the loss and `dlogits = (softmax − onehot) / batch`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    if logits.dims.len() != 2 || logits.dims[0] != labels.len() {
        return Err(Error::Shape(format!(
            "cross_entropy logits {:?} with {} labels",
            logits.dims,
            labels.len()
        )));
    }
    let (batch, classes) = (logits.dims[0], logits.dims[1]);
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0f64;
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - (row[label] as f64 - max);
        for (j, e) in exps.iter().enumerate() {
            let p = e / sum;
            let t = if j == label { 1.0 } else { 0.0 };
            grad[i * classes + j] = ((p - t) / batch as f64) as f32;
        }
    }
    Ok((loss / batch as f64, Tensor::new(logits.dims.clone(), grad)?))
}

/// Central-difference gradient of a scalar function.
///
/// The actual perturbation is measured after rounding to `f32`, so the
/// quotient uses the step the function really saw.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f32) -> Tensor {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = x.data[i];
        let up = orig + h;
        let down = orig - h;
        probe.data[i] = up;
        let fu = f(&probe);
        probe.data[i] = down;
        let fd = f(&probe);
        probe.data[i] = orig;
        *g = ((fu - fd) / (up as f64 - down as f64)) as f32;
    }
    Tensor {
        dims: x.dims.clone(),
        data: grad,
    }
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f32], b: &[f32], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
