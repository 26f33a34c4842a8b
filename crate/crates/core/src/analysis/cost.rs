//! Arithmetic cost model of the mixed-precision gradient.
//!
//! Operation counts per gradient evaluation with sample sizes `n_i` and
//! `n = prod n_i`: the residual sub-tensor takes `2nr`, the Khatri-Rao
//! operands `sum_i (n/n_i) r`, and the m unfolded products `2mnr`. The first
//! two run in the staging precision, the products in the low-bit format.

use crate::error::{Error, Result};
use crate::precision::PrecisionFormat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostEstimate {
    pub order: usize,
    pub bits: u32,
    /// Approximate cost of the FP16/INT(b) gradient relative to FP32/FP32.
    pub normalized_cost: f64,
}

/// Cost of one arithmetic operation in `p`, in units of an FP32 operation.
/// Floats scale with width; fixed point costs half a float of equal width.
pub fn op_cost(p: PrecisionFormat) -> f64 {
    match p {
        PrecisionFormat::Int(b) => b as f64 / 64.0,
        other => other.bits() as f64 / 32.0,
    }
}

/// `(1 + (b/32) m) / (2 + 2m)`.
pub fn cost_model(order: usize, bits: u32) -> Result<CostEstimate> {
    if order < 3 {
        return Err(Error::Domain(format!("cost model needs order >= 3, got {order}")));
    }
    if !matches!(bits, 2 | 4 | 8) {
        return Err(Error::Domain(format!("cost model covers int2/int4/int8, got int{bits}")));
    }
    let m = order as f64;
    let normalized_cost = (1.0 + bits as f64 / 32.0 * m) / (2.0 + 2.0 * m);
    Ok(CostEstimate { order, bits, normalized_cost })
}

/// `C(p1, p2) = c_p1 (2nr + sum_i (n/n_i) r) + 2 c_p2 m n r` in FP32 units.
pub fn gradient_cost(sample_sizes: &[usize], rank: usize, p1: PrecisionFormat, p2: PrecisionFormat) -> Result<f64> {
    if sample_sizes.is_empty() || sample_sizes.contains(&0) || rank == 0 {
        return Err(Error::Domain("sample sizes and rank must be positive".into()));
    }
    let n: f64 = sample_sizes.iter().map(|&s| s as f64).product();
    let r = rank as f64;
    let m = sample_sizes.len() as f64;
    let kr: f64 = sample_sizes.iter().map(|&s| n / s as f64 * r).sum();
    Ok(op_cost(p1) * (2.0 * n * r + kr) + 2.0 * op_cost(p2) * m * n * r)
}

/// `C(FP16, INT(b)) / C(FP32, FP32)` without dropping the Khatri-Rao term.
pub fn gradient_cost_ratio(sample_sizes: &[usize], rank: usize, bits: u32) -> Result<f64> {
    let mixed = gradient_cost(sample_sizes, rank, PrecisionFormat::Fp16, PrecisionFormat::Int(bits))?;
    let full = gradient_cost(sample_sizes, rank, PrecisionFormat::Fp32, PrecisionFormat::Fp32)?;
    Ok(mixed / full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_table_points() {
        assert_eq!(cost_model(3, 8).unwrap().normalized_cost, 0.21875);
        assert_eq!(cost_model(4, 4).unwrap().normalized_cost, 0.15);
        assert_eq!(cost_model(5, 2).unwrap().normalized_cost, 0.109375);
    }

    #[test]
    fn cost_model_domain() {
        assert!(cost_model(2, 8).is_err());
        assert!(cost_model(3, 16).is_err());
    }

    #[test]
    fn exact_ratio_approaches_model_for_large_samples() {
        let approx = cost_model(3, 8).unwrap().normalized_cost;
        let exact = gradient_cost_ratio(&[240, 240, 240], 16, 8).unwrap();
        assert!((exact - approx).abs() < 1e-3, "{exact} vs {approx}");
        // Small samples weigh the Khatri-Rao term more heavily.
        let small = gradient_cost_ratio(&[4, 4, 4], 5, 8).unwrap();
        assert!(small > exact);
    }

    #[test]
    fn op_costs() {
        assert_eq!(op_cost(PrecisionFormat::Fp16), 0.5);
        assert_eq!(op_cost(PrecisionFormat::Fp32), 1.0);
        assert_eq!(op_cost(PrecisionFormat::Int(8)), 0.125);
    }
}
