//! Dense row-major matrices and the numerically stable kernels built on them.
//!
//! Every reduction runs left to right over its inner index, so results are
//! bit-reproducible for a given input regardless of call site.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Added to the norm product in cosine similarity so zero vectors give 0 instead of NaN.
pub const COSINE_EPS: f64 = 1e-12;
/// Variance floor inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("Matrix::from_rows", "ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn row_vector(v: &[T]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects a contiguous block of columns.
    pub fn columns(&self, start: usize, len: usize) -> Self {
        Self::from_fn(self.rows, len, |r, c| self[(r, start + c)])
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hcat(parts: &[&Matrix<T>]) -> Result<Self> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::ShapeMismatch {
                op: "hcat",
                left: (rows, 0),
                right: bad.shape(),
            });
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Per-column sums.
    /// Stacks matrices of equal width on top of each other.
    pub fn vcat(parts: &[Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if let Some(bad) = parts.iter().find(|m| m.cols != cols) {
            return Err(Error::ShapeMismatch {
                op: "vcat",
                left: (0, cols),
                right: bad.shape(),
            });
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let data = parts.iter().flat_map(|m| m.data.iter().copied()).collect();
        Ok(Self { rows, cols, data })
    }

    pub fn column_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    /// Adds `bias` to every row.
    pub fn add_row_broadcast(&mut self, bias: &[T]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.shape(),
                right: (1, bias.len()),
            });
        }
        for r in 0..self.rows {
            for (v, &b) in self.row_mut(r).iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(())
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// `a · b`, summing over the inner dimension in increasing index order.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.cols {
            let mut acc = T::zero();
            for (k, &av) in a_row.iter().enumerate() {
                acc += av * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for i in 0..a.cols {
        for j in 0..b.cols {
            let mut acc = T::zero();
            for k in 0..a.rows {
                acc += a.data[k * a.cols + i] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j));
        }
    }
    Ok(out)
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Max-shifted softmax of one row.
pub fn softmax_slice<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let mut total = T::zero();
    for &e in &exps {
        total += e;
    }
    exps.into_iter().map(|e| e / total).collect()
}

/// Pulls an upstream gradient back through `p = softmax(z)`: `dz = p ⊙ (dp − ⟨dp, p⟩)`.
pub fn softmax_backward<T: Scalar>(p: &[T], dp: &[T]) -> Vec<T> {
    let inner = dot(dp, p);
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - inner)).collect()
}

pub fn stable_softmax_rows<T: Scalar>(m: &Matrix<T>) -> Result<Matrix<T>> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::contract("stable_softmax_rows", "empty matrix"));
    }
    if m.data.iter().any(|v| v.is_nan()) {
        return Err(Error::contract("stable_softmax_rows", "NaN in input"));
    }
    let mut data = Vec::with_capacity(m.data.len());
    for r in 0..m.rows {
        data.extend(softmax_slice(m.row(r)));
    }
    Matrix::new(m.rows, m.cols, data)
}

#[inline]
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    dot(a, b) / (norm(a) * norm(b) + T::lit(COSINE_EPS))
}

/// Gradients of `cosine(a, b)` with respect to `a` and `b`, scaled by `upstream`,
/// accumulated into `da` / `db`.
pub fn cosine_backward<T: Scalar>(a: &[T], b: &[T], upstream: T, da: &mut [T], db: &mut [T]) {
    let na = norm(a);
    let nb = norm(b);
    let denom = na * nb + T::lit(COSINE_EPS);
    let num = dot(a, b);
    let g = upstream / denom;
    // d denom / da = nb * a / na; zero-norm rows contribute only the numerator term.
    let ka = if na > T::zero() {
        upstream * num * nb / (denom * denom * na)
    } else {
        T::zero()
    };
    let kb = if nb > T::zero() {
        upstream * num * na / (denom * denom * nb)
    } else {
        T::zero()
    };
    for i in 0..a.len() {
        da[i] += g * b[i] - ka * a[i];
        db[i] += g * a[i] - kb * b[i];
    }
}

/// Pairwise cosine similarity between the rows of `q` and the rows of `k`.
pub fn cosine_rows<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>) -> Result<Matrix<T>> {
    if q.cols != k.cols {
        return Err(Error::ShapeMismatch {
            op: "cosine_rows",
            left: q.shape(),
            right: k.shape(),
        });
    }
    Ok(Matrix::from_fn(q.rows, k.rows, |i, j| cosine(q.row(i), k.row(j))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Vec<T>,
    /// Unbiased-corrected running variance; entries stay positive.
    pub var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BnRunning<T> {
    pub fn new(width: usize) -> Self {
        Self {
            mean: vec![T::zero(); width],
            var: vec![T::one(); width],
            momentum: T::lit(BN_MOMENTUM),
            eps: T::lit(BN_EPS),
        }
    }

    /// Folds one train-mode batch into the running estimates.
    pub fn update(&mut self, cache: &BnCache<T>) {
        let b = T::from_usize_lossy(cache.batch);
        let correction = b / (b - T::one());
        let m = self.momentum;
        for c in 0..self.mean.len() {
            self.mean[c] = (T::one() - m) * self.mean[c] + m * cache.mean[c];
            self.var[c] = (T::one() - m) * self.var[c] + m * cache.var[c] * correction;
        }
    }
}

/// Everything train-mode batch normalization needs for its backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnCache<T> {
    pub batch: usize,
    pub x_hat: Matrix<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check_bn_shapes<T: Scalar>(x: &Matrix<T>, scale: &[T], shift: &[T]) -> Result<()> {
    if scale.len() != x.cols || shift.len() != x.cols {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            left: x.shape(),
            right: (scale.len(), shift.len()),
        });
    }
    Ok(())
}

/// Train-mode normalization with batch statistics. Pure: running statistics are not touched.
pub fn batchnorm_train<T: Scalar>(
    x: &Matrix<T>,
    scale: &[T],
    shift: &[T],
    eps: T,
) -> Result<(Matrix<T>, BnCache<T>)> {
    check_bn_shapes(x, scale, shift)?;
    if x.rows < 2 {
        return Err(Error::contract(
            "batchnorm_forward",
            format!("train mode needs a batch of at least 2 rows, got {}", x.rows),
        ));
    }
    let b = T::from_usize_lossy(x.rows);
    let mean: Vec<T> = x.column_sums().into_iter().map(|s| s / b).collect();
    let mut var = vec![T::zero(); x.cols];
    for r in 0..x.rows {
        for (c, &v) in x.row(r).iter().enumerate() {
            let d = v - mean[c];
            var[c] += d * d;
        }
    }
    for v in &mut var {
        *v /= b;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let x_hat = Matrix::from_fn(x.rows, x.cols, |r, c| (x[(r, c)] - mean[c]) * inv_std[c]);
    let out = Matrix::from_fn(x.rows, x.cols, |r, c| scale[c] * x_hat[(r, c)] + shift[c]);
    Ok((
        out,
        BnCache {
            batch: x.rows,
            x_hat,
            mean,
            var,
            inv_std,
        },
    ))
}

pub fn batchnorm_eval<T: Scalar>(
    x: &Matrix<T>,
    scale: &[T],
    shift: &[T],
    state: &BnRunning<T>,
) -> Result<Matrix<T>> {
    check_bn_shapes(x, scale, shift)?;
    let inv_std: Vec<T> = state
        .var
        .iter()
        .map(|&v| T::one() / (v + state.eps).sqrt())
        .collect();
    Ok(Matrix::from_fn(x.rows, x.cols, |r, c| {
        scale[c] * (x[(r, c)] - state.mean[c]) * inv_std[c] + shift[c]
    }))
}

/// Batch normalization. Train mode normalizes by the batch and updates `state`;
/// eval mode normalizes by `state`.
pub fn batchnorm_forward<T: Scalar>(
    x: &Matrix<T>,
    scale: &[T],
    shift: &[T],
    state: &mut BnRunning<T>,
    mode: BnMode,
) -> Result<Matrix<T>> {
    match mode {
        BnMode::Train => {
            let (out, cache) = batchnorm_train(x, scale, shift, state.eps)?;
            state.update(&cache);
            Ok(out)
        }
        BnMode::Eval => batchnorm_eval(x, scale, shift, state),
    }
}

/// Gradients of train-mode batch normalization: `(dx, dscale, dshift)`.
pub fn batchnorm_backward<T: Scalar>(
    dout: &Matrix<T>,
    scale: &[T],
    cache: &BnCache<T>,
) -> (Matrix<T>, Vec<T>, Vec<T>) {
    let (rows, cols) = dout.shape();
    let b = T::from_usize_lossy(rows);
    let mut dscale = vec![T::zero(); cols];
    let mut dshift = vec![T::zero(); cols];
    let mut sum_dxhat = vec![T::zero(); cols];
    let mut sum_dxhat_xhat = vec![T::zero(); cols];
    for r in 0..rows {
        for c in 0..cols {
            let g = dout[(r, c)];
            let xh = cache.x_hat[(r, c)];
            dscale[c] += g * xh;
            dshift[c] += g;
            let dxh = g * scale[c];
            sum_dxhat[c] += dxh;
            sum_dxhat_xhat[c] += dxh * xh;
        }
    }
    let dx = Matrix::from_fn(rows, cols, |r, c| {
        let dxh = dout[(r, c)] * scale[c];
        cache.inv_std[c] / b * (b * dxh - sum_dxhat[c] - cache.x_hat[(r, c)] * sum_dxhat_xhat[c])
    });
    (dx, dscale, dshift)
}
