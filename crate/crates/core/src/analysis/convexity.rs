//! Numerical certificate of local strong convexity for the normalized CP
//! problem, where the leading row of factors `2..m` is held fixed.
//!
//! At an exact decomposition the Hessian of the normalized objective
//! `||h(theta) - vec(A)||^2` equals `2 J^T J`, with `J` the Jacobian of the
//! reconstruction map `h` with respect to the free parameters. It is positive
//! definite exactly when `J` has full column rank.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::sgrad::full_gradient;
use crate::tensor::{cp_reconstruct, DenseTensor, FactorSet, Matrix};

/// Largest tensor (in entries) the dense Jacobian checker will assemble.
pub const MAX_JACOBIAN_ROWS: usize = 100_000;

/// Default relative singular-value threshold for the rank verdict.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    FullRank,
    Deficient,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::FullRank => "full-rank",
            Verdict::Deficient => "deficient",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexityReport {
    pub rows: usize,
    pub cols: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Smallest eigenvalue of `2 J^T J`, i.e. `2 sigma_min^2`.
    pub lambda_min: f64,
    pub tol: f64,
    pub verdict: Verdict,
}

/// Number of free parameters: all of factor 1, rows `2..N_i` of the others.
pub fn num_free_params(f: &FactorSet) -> usize {
    let r = f.rank();
    f.factors().iter().enumerate().map(|(k, u)| if k == 0 { u.rows() * r } else { (u.rows() - 1) * r }).sum()
}

/// Free parameters in Jacobian column order: mode by mode, then factor
/// column, then row.
pub fn free_params(f: &FactorSet) -> Vec<f64> {
    let mut out = Vec::with_capacity(num_free_params(f));
    for (k, u) in f.factors().iter().enumerate() {
        let first = usize::from(k > 0);
        for j in 0..u.cols() {
            for l in first..u.rows() {
                out.push(u.get(l, j));
            }
        }
    }
    out
}

/// Copy of `f` with its free parameters replaced; leading rows of factors
/// `2..m` are kept.
pub fn with_free_params(f: &FactorSet, params: &[f64]) -> Result<FactorSet> {
    if params.len() != num_free_params(f) {
        return Err(Error::Shape(format!("{} parameters, expected {}", params.len(), num_free_params(f))));
    }
    let mut out = f.clone();
    let mut it = params.iter();
    for k in 0..out.order() {
        let first = usize::from(k > 0);
        let u = out.factor_mut(k);
        for j in 0..u.cols() {
            for l in first..u.rows() {
                u.set(l, j, *it.next().expect("length checked"));
            }
        }
    }
    Ok(out)
}

fn check_size(f: &FactorSet) -> Result<usize> {
    if f.order() < 2 {
        return Err(Error::Domain("normalized Jacobian needs order >= 2".into()));
    }
    let n: usize = f.dims().iter().product();
    if n > MAX_JACOBIAN_ROWS {
        return Err(Error::Domain(format!("{n} tensor entries exceed the checker cap {MAX_JACOBIAN_ROWS}")));
    }
    Ok(n)
}

/// Jacobian of `vec([[U_1, [u_2; U~_2], ..., [u_m; U~_m]]])` (row-major vec)
/// with respect to the free parameters, one row per tensor entry.
pub fn jacobian_h(f: &FactorSet) -> Result<Matrix> {
    let n = check_size(f)?;
    let dims = f.dims();
    let m = dims.len();
    let r = f.rank();

    // Column offset of (mode k, factor column j); row l maps to offset + l - first.
    let mut offsets = vec![vec![0usize; r]; m];
    let mut col = 0;
    for (k, &d) in dims.iter().enumerate() {
        let free_rows = if k == 0 { d } else { d - 1 };
        for off in offsets[k].iter_mut() {
            *off = col;
            col += free_rows;
        }
    }
    let mut jac = Matrix::zeros(n, col);
    let mut idx = vec![0usize; m];
    let mut others = vec![0.0; m];
    for row in 0..n {
        for j in 0..r {
            // Prefix/suffix products give every leave-one-out product.
            let mut prefix = 1.0;
            for (k, &i) in idx.iter().enumerate() {
                others[k] = prefix;
                prefix *= f.factor(k).get(i, j);
            }
            let mut suffix = 1.0;
            for k in (0..m).rev() {
                others[k] *= suffix;
                suffix *= f.factor(k).get(idx[k], j);
            }
            for k in 0..m {
                let l = idx[k];
                if k > 0 && l == 0 {
                    continue;
                }
                let c = offsets[k][j] + l - usize::from(k > 0);
                jac.set(row, c, others[k]);
            }
        }
        crate::tensor::advance(&mut idx, &dims);
    }
    Ok(jac)
}

fn to_nalgebra(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Singular-value rank test of the normalized Jacobian at `f`.
pub fn check_local_convexity(f: &FactorSet, tol: f64) -> Result<ConvexityReport> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("rank tolerance must be positive, got {tol}")));
    }
    let jac = jacobian_h(f)?;
    let (rows, cols) = (jac.rows(), jac.cols());
    let svals = to_nalgebra(&jac).singular_values();
    let sigma_max = svals.iter().copied().fold(0.0, f64::max);
    // A wide Jacobian has a nontrivial kernel regardless of its singular values.
    let sigma_min = if cols > rows { 0.0 } else { svals.iter().copied().fold(f64::INFINITY, f64::min) };
    let verdict = if cols <= rows && sigma_min > tol * sigma_max { Verdict::FullRank } else { Verdict::Deficient };
    Ok(ConvexityReport { rows, cols, sigma_min, sigma_max, lambda_min: 2.0 * sigma_min * sigma_min, tol, verdict })
}

/// Gradient of the unnormalized objective `||A - [[f]]||^2` restricted to the
/// free parameters, in Jacobian column order.
pub fn normalized_gradient(a: &DenseTensor, f: &FactorSet) -> Result<Vec<f64>> {
    // The full gradient is of the entry-averaged objective; undo the 1/N.
    let g = full_gradient(a, f)?;
    let scale = a.len() as f64;
    let mut out = Vec::with_capacity(num_free_params(f));
    for (k, gk) in g.grads().iter().enumerate() {
        let first = usize::from(k > 0);
        for j in 0..gk.cols() {
            for l in first..gk.rows() {
                out.push(scale * gk.get(l, j));
            }
        }
    }
    Ok(out)
}

/// Hessian of the normalized objective by central differences of its
/// analytic gradient, symmetrized.
pub fn hessian_fd(a: &DenseTensor, f: &FactorSet, step: f64) -> Result<Matrix> {
    check_size(f)?;
    let theta = free_params(f);
    let mut err = None;
    let h = super::finite_diff::finite_diff(
        |p| match with_free_params(f, p).and_then(|g| normalized_gradient(a, &g)) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                vec![0.0; theta.len()]
            }
        },
        &theta,
        step,
    );
    if let Some(e) = err {
        return Err(e);
    }
    Ok(Matrix::from_fn(h.rows(), h.cols(), |i, j| 0.5 * (h.get(i, j) + h.get(j, i))))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(sym: &Matrix) -> f64 {
    SymmetricEigen::new(to_nalgebra(sym)).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// `lambda_min` of the finite-difference Hessian at an exact decomposition
/// `A = [[f]]`.
pub fn hessian_min_eigenvalue_fd(f: &FactorSet, step: f64) -> Result<f64> {
    let a = cp_reconstruct(f);
    Ok(min_eigenvalue(&hessian_fd(&a, f, step)?))
}
