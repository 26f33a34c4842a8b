//! Central finite differences.

use crate::tensor::Matrix;

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn derivative(f: impl Fn(f64) -> f64, x: f64, step: f64) -> f64 {
    assert!(step > 0.0, "finite-difference step must be positive");
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Jacobian of a vector-valued function by central differences: entry
/// `(i, j)` estimates `d f_i / d x_j`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> Vec<f64>, point: &[f64], step: f64) -> Matrix {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut x = point.to_vec();
    let mut cols = Vec::with_capacity(point.len());
    let mut outputs = 0;
    for j in 0..point.len() {
        let orig = x[j];
        x[j] = orig + step;
        let plus = f(&x);
        x[j] = orig - step;
        let minus = f(&x);
        x[j] = orig;
        outputs = plus.len();
        cols.push(plus.iter().zip(&minus).map(|(p, m)| (p - m) / (2.0 * step)).collect::<Vec<_>>());
    }
    Matrix::from_fn(outputs, point.len(), |i, j| cols[j][i])
}
