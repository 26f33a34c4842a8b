//! Rank thresholds below which the normalized CP problem is generically
//! locally strongly convex at an exact decomposition.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankBound {
    /// Dimensions sorted in descending order.
    pub dims: Vec<usize>,
    /// Reduced sizes of the three smallest modes used for the order-3 base
    /// case: the first is even and the three are non-increasing.
    pub reduced: [usize; 3],
    pub r3: usize,
    /// `r_3, r_4, ..., r_m`.
    pub chain: Vec<usize>,
    pub rm: usize,
}

/// Computes `r_3` from the three smallest dimensions and extends it to
/// `r_m` by the order recursion.
///
/// The reduced base sizes are chosen lexicographically: the largest even
/// value not exceeding the third-smallest dimension, then each following size
/// capped by its own dimension and by the previous reduced size.
pub fn rank_bound(dims: &[usize]) -> Result<RankBound> {
    let m = dims.len();
    if m < 3 {
        return Err(Error::Domain(format!("rank bound needs order >= 3, got {m}")));
    }
    if let Some(&d) = dims.iter().find(|&&d| d < 3) {
        return Err(Error::Domain(format!("every dimension must be at least 3, got {d}")));
    }
    let mut n = dims.to_vec();
    n.sort_unstable_by(|a, b| b.cmp(a));

    let a = n[m - 3] - n[m - 3] % 2;
    let b = n[m - 2].min(a);
    let c = n[m - 1].min(b);
    let r3 = a * ((b * c) / (a + b + c - 2));

    let mut chain = vec![r3];
    for k in 4..=m {
        // One-based N_{m-k+1} is index m-k.
        let lead = n[m - k];
        let tail_prod: usize = n[m - k + 1..].iter().product();
        let denom: usize = n[m - k..].iter().sum::<usize>() + 1 - k;
        let prev = *chain.last().expect("chain starts with r3");
        chain.push(lead * prev.min(tail_prod / denom));
    }
    let rm = *chain.last().expect("nonempty");
    Ok(RankBound { dims: n, reduced: [a, b, c], r3, chain, rm })
}
