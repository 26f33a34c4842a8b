//! Cost model, rank bounds and the local-convexity checker.

pub mod convexity;
pub mod cost;
pub mod finite_diff;
pub mod rank;

pub use convexity::{
    check_local_convexity, free_params, hessian_fd, hessian_min_eigenvalue_fd, jacobian_h, min_eigenvalue,
    num_free_params, with_free_params, ConvexityReport, Verdict, DEFAULT_RANK_TOL,
};
pub use cost::{cost_model, gradient_cost, gradient_cost_ratio, op_cost, CostEstimate};
pub use finite_diff::{derivative, finite_diff};
pub use rank::{rank_bound, RankBound};
