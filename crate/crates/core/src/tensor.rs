//! Dense tensors, small dense matrices and the multilinear primitives used by
//! the decomposition: mode unfolding, Khatri-Rao products, CP reconstruction
//! and Frobenius norms.
//!
//! Storage is row-major everywhere (last index fastest). Mode indices are
//! zero-based. All accumulation happens in `f64`; precision emulation lives in
//! [`crate::precision`] and [`crate::sgrad`].

use crate::error::{Error, Result};
use crate::sgrad::SampleBlock;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; intended for
    /// literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged matrix literal");
            data.extend_from_slice(r);
        }
        Matrix { rows: rows.len(), cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix { rows: rows.len(), cols: self.cols, data }
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// `self * other`. Each output entry is accumulated left to right over the
    /// inner dimension, so results are reproducible bit for bit.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn fro_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }
}

/// Order-m real tensor in row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("tensor order must be at least 1".into()));
        }
        if let Some(pos) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape(format!("dimension {pos} is zero")));
        }
        let len = checked_len(&dims)?;
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?} (expected {len})",
                data.len(),
                dims
            )));
        }
        Ok(DenseTensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let len = checked_len(&dims)?;
        DenseTensor::new(dims, vec![0.0; len])
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len = checked_len(&dims)?;
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..len {
            data.push(f(&idx));
            advance(&mut idx, &dims);
        }
        DenseTensor::new(dims, data)
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.dims.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn linear_index(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "index of length {} for order-{} tensor",
                idx.len(),
                self.dims.len()
            )));
        }
        let mut lin = 0;
        for (mode, (&i, &d)) in idx.iter().zip(&self.dims).enumerate() {
            if i >= d {
                return Err(Error::Index { mode, index: i, size: d });
            }
            lin = lin * d + i;
        }
        Ok(lin)
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.data[self.linear_index(idx)?])
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!("dims {:?} vs {:?}", self.dims, other.dims)));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(DenseTensor { dims: self.dims.clone(), data })
    }
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape(format!("element count of {dims:?} overflows")))
}

/// Row-major odometer increment.
pub(crate) fn advance(idx: &mut [usize], dims: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < dims[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// The m factor matrices of a CP model, factor `k` of shape `N_k x r`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    rank: usize,
    factors: Vec<Matrix>,
}

impl FactorSet {
    pub fn new(factors: Vec<Matrix>) -> Result<Self> {
        let first = factors.first().ok_or_else(|| Error::Shape("no factors".into()))?;
        let rank = first.cols();
        if rank == 0 {
            return Err(Error::Shape("rank must be positive".into()));
        }
        for (k, f) in factors.iter().enumerate() {
            if f.cols() != rank {
                return Err(Error::Shape(format!(
                    "factor {k} has {} columns, expected rank {rank}",
                    f.cols()
                )));
            }
            if f.rows() == 0 {
                return Err(Error::Shape(format!("factor {k} has no rows")));
            }
        }
        Ok(FactorSet { rank, factors })
    }

    pub fn zeros(dims: &[usize], rank: usize) -> Result<Self> {
        FactorSet::new(dims.iter().map(|&d| Matrix::zeros(d, rank)).collect())
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(Matrix::rows).collect()
    }

    #[inline]
    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    #[inline]
    pub fn factor(&self, k: usize) -> &Matrix {
        &self.factors[k]
    }

    #[inline]
    pub fn factor_mut(&mut self, k: usize) -> &mut Matrix {
        &mut self.factors[k]
    }

    pub fn into_factors(self) -> Vec<Matrix> {
        self.factors
    }

    /// Number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.factors.iter().map(|f| f.rows() * f.cols()).sum()
    }

    pub(crate) fn check_dims(&self, dims: &[usize]) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::Shape(format!(
                "factor rows {:?} do not match tensor dims {dims:?}",
                self.dims()
            )));
        }
        Ok(())
    }
}

/// Mode-k unfolding: row `j` holds the slice `i_k = j`; columns enumerate the
/// remaining indices in increasing mode order with earlier modes varying
/// slowest.
pub fn mode_unfold(t: &DenseTensor, k: usize) -> Result<Matrix> {
    let dims = t.dims();
    if k >= dims.len() {
        return Err(Error::ModeIndex { mode: k, order: dims.len() });
    }
    let outer: usize = dims[..k].iter().product();
    let inner: usize = dims[k + 1..].iter().product();
    let nk = dims[k];
    let cols = outer * inner;
    let mut out = Matrix::zeros(nk, cols);
    let src = t.data();
    for o in 0..outer {
        for i in 0..nk {
            let from = &src[(o * nk + i) * inner..(o * nk + i + 1) * inner];
            out.row_mut(i)[o * inner..(o + 1) * inner].copy_from_slice(from);
        }
    }
    Ok(out)
}

/// Inverse of [`mode_unfold`].
pub fn mode_fold(m: &Matrix, dims: &[usize], k: usize) -> Result<DenseTensor> {
    if k >= dims.len() {
        return Err(Error::ModeIndex { mode: k, order: dims.len() });
    }
    let outer: usize = dims[..k].iter().product();
    let inner: usize = dims[k + 1..].iter().product();
    let nk = dims[k];
    if m.rows() != nk || m.cols() != outer * inner {
        return Err(Error::Shape(format!(
            "{}x{} matrix cannot fold into {dims:?} along mode {k}",
            m.rows(),
            m.cols()
        )));
    }
    let mut data = vec![0.0; nk * outer * inner];
    for o in 0..outer {
        for i in 0..nk {
            data[(o * nk + i) * inner..(o * nk + i + 1) * inner]
                .copy_from_slice(&m.row(i)[o * inner..(o + 1) * inner]);
        }
    }
    DenseTensor::new(dims.to_vec(), data)
}

/// Column-wise Kronecker product; the first matrix varies slowest.
pub fn khatri_rao(mats: &[&Matrix]) -> Result<Matrix> {
    let first = mats.first().ok_or_else(|| Error::Shape("empty Khatri-Rao product".into()))?;
    let r = first.cols();
    if let Some(bad) = mats.iter().find(|m| m.cols() != r) {
        return Err(Error::Shape(format!(
            "Khatri-Rao operands have {} and {} columns",
            r,
            bad.cols()
        )));
    }
    let mut acc = (*first).clone();
    for m in &mats[1..] {
        let mut next = Matrix::zeros(acc.rows() * m.rows(), r);
        for a in 0..acc.rows() {
            let a_row = acc.row(a);
            for b in 0..m.rows() {
                let b_row = m.row(b);
                let out = next.row_mut(a * m.rows() + b);
                for c in 0..r {
                    out[c] = a_row[c] * b_row[c];
                }
            }
        }
        acc = next;
    }
    Ok(acc)
}

/// Khatri-Rao product of every factor except `skip`, in increasing mode order.
pub fn khatri_rao_except(factors: &[Matrix], skip: usize) -> Result<Matrix> {
    let refs: Vec<&Matrix> =
        factors.iter().enumerate().filter(|(j, _)| *j != skip).map(|(_, m)| m).collect();
    if refs.is_empty() {
        // Order-1 model: the empty product is a single row of ones.
        let r = factors.first().map_or(0, Matrix::cols);
        return Ok(Matrix::from_vec(1, r, vec![1.0; r])?);
    }
    khatri_rao(&refs)
}

/// Sum of rank-1 outer products of matching factor columns.
pub fn cp_reconstruct(f: &FactorSet) -> DenseTensor {
    let dims = f.dims();
    let r = f.rank();
    let m = dims.len();
    let last = &f.factors()[m - 1];
    let n_last = dims[m - 1];
    let prefix_dims = &dims[..m - 1];
    let prefix_len: usize = prefix_dims.iter().product();
    let mut data = Vec::with_capacity(prefix_len * n_last);
    let mut idx = vec![0usize; m - 1];
    let mut prefix = vec![1.0; r];
    for _ in 0..prefix_len {
        prefix.iter_mut().for_each(|p| *p = 1.0);
        for (k, &i) in idx.iter().enumerate() {
            for (p, &u) in prefix.iter_mut().zip(f.factors()[k].row(i)) {
                *p *= u;
            }
        }
        for i in 0..n_last {
            let s: f64 = prefix.iter().zip(last.row(i)).map(|(p, u)| p * u).sum();
            data.push(s);
        }
        advance(&mut idx, prefix_dims);
    }
    DenseTensor { dims, data }
}

/// Gathers `t(I_1, ..., I_m)` in block index order.
pub fn sub_tensor(t: &DenseTensor, block: &SampleBlock) -> Result<DenseTensor> {
    let sets = block.indices();
    let dims = t.dims();
    if sets.len() != dims.len() {
        return Err(Error::Shape(format!(
            "block of order {} for order-{} tensor",
            sets.len(),
            dims.len()
        )));
    }
    for (mode, (set, &d)) in sets.iter().zip(dims).enumerate() {
        if let Some(&bad) = set.iter().find(|&&i| i >= d) {
            return Err(Error::Index { mode, index: bad, size: d });
        }
    }
    let sizes = block.sizes();
    let len: usize = sizes.iter().product();
    let mut strides = vec![1usize; dims.len()];
    for k in (0..dims.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    let mut data = Vec::with_capacity(len);
    let mut pos = vec![0usize; dims.len()];
    for _ in 0..len {
        let lin: usize = pos.iter().enumerate().map(|(k, &p)| sets[k][p] * strides[k]).sum();
        data.push(t.data()[lin]);
        advance(&mut pos, &sizes);
    }
    DenseTensor::new(sizes, data)
}

pub fn fro_norm(t: &DenseTensor) -> f64 {
    t.data().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||t - [[f]]||_F / ||t||_F`.
pub fn relative_error(t: &DenseTensor, f: &FactorSet) -> Result<f64> {
    f.check_dims(t.dims())?;
    let norm = fro_norm(t);
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let recon = cp_reconstruct(f);
    let resid: f64 = t.data().iter().zip(recon.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(resid.sqrt() / norm)
}
