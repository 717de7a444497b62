use crate::error::{MatError, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(MatError::Argument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MatError::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MatError::Argument("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Converts `f64` values to the tensor's scalar type.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::lit(v.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64_lossless();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.matrix_dims("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(MatError::Argument(format!(
                "row slice {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        Ok(Tensor {
            shape: vec![len, c],
            data: self.data[start * c..(start + len) * c].to_vec(),
        })
    }

    pub fn concat_rows(parts: &[&Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| MatError::Argument("concat of zero tensors".into()))?;
        let c = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = p.matrix_dims("concat_rows")?;
            if pc != c {
                return Err(MatError::shape("concat_rows", first.shape(), p.shape()));
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        Ok(Tensor {
            shape: vec![rows, c],
            data,
        })
    }

    pub(crate) fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(MatError::shape(op, &self.shape, &[0, 0])),
        }
    }
}

/// Standard matrix product `a · b`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(MatError::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// `out += a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Softmax over one row in place; masked entries become exactly zero.
///
/// Returns `false` when every entry is masked.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], allowed: Option<&[bool]>) -> bool {
    let ok = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut max = T::neg_infinity();
    let mut any = false;
    for (j, &v) in row.iter().enumerate() {
        if ok(j) {
            any = true;
            if v > max || v.is_nan() {
                max = v;
            }
        }
    }
    if !any {
        return false;
    }
    if !max.is_finite() {
        // non-finite logits propagate as NaN
        row.fill(T::nan());
        return true;
    }
    let mut sum = T::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if ok(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = T::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    true
}

/// Softmax over the last axis. `mask` has the same layout as `x`; `true`
/// marks a position that takes part in the normalization.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>, mask: Option<&[bool]>) -> Result<Tensor<T>> {
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(MatError::shape("softmax", x.shape(), &[m.len()]));
        }
    }
    let n = x.cols();
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
        let allowed = mask.map(|m| &m[r * n..(r + 1) * n]);
        if !softmax_row(row, allowed) {
            return Err(MatError::Masking { row: r });
        }
    }
    Ok(out)
}

/// Per-row normalization statistics used by the forward and backward pass.
pub(crate) struct NormStats<T> {
    pub normed: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_stats<T: Scalar>(x: &[T], d: usize, eps: T) -> NormStats<T> {
    let rows = x.len() / d;
    let mut normed = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (o, &v) in normed[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    NormStats { normed, rstd }
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(MatError::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let stats = layer_norm_stats(x.data(), d, eps);
    let mut out = stats.normed;
    for row in out.chunks_mut(d) {
        for ((o, &g), &b) in row.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = *o * g + b;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Source row and blend weight for each output row of the align-endpoints
/// linear interpolation from `n` to `target` rows.
pub(crate) fn interp_plan(n: usize, target: usize) -> Vec<(usize, f64)> {
    (0..target)
        .map(|i| {
            if n == 1 || target == 1 {
                return (0, 0.0);
            }
            if i == target - 1 {
                return (n - 1, 0.0);
            }
            let pos = i as f64 * (n - 1) as f64 / (target - 1) as f64;
            let j = pos.floor() as usize;
            (j, pos - j as f64)
        })
        .collect()
}

/// Linear interpolation along the token axis with aligned endpoints, applied
/// independently to each channel.
pub fn interpolate_linear_1d<T: Scalar>(x: &Tensor<T>, target_len: usize) -> Result<Tensor<T>> {
    let (n, d) = x.matrix_dims("interpolate")?;
    if target_len == 0 {
        return Err(MatError::Argument("target_len must be positive".into()));
    }
    let mut out = Vec::with_capacity(target_len * d);
    for (j, w) in interp_plan(n, target_len) {
        let lo = x.row(j);
        if w == 0.0 {
            out.extend_from_slice(lo);
        } else {
            let hi = x.row(j + 1);
            let (wl, wh) = (T::lit(1.0 - w), T::lit(w));
            out.extend(lo.iter().zip(hi).map(|(&a, &b)| wl * a + wh * b));
        }
    }
    Tensor::new(vec![target_len, d], out)
}
