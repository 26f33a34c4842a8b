//! Mixed-precision stochastic gradient CP decomposition.
//!
//! Low-precision arithmetic is emulated in software: factor entries and
//! Khatri-Rao products are staged through FP16, and the unfolded gradient
//! products run as exact integer GEMMs on INT2/INT4/INT8 codes. A two-stage
//! SignSGD then SGD driver fits the factors; the [`analysis`] module holds the
//! cost model, rank bounds and a local-convexity checker.

pub mod analysis;
pub mod cli;
pub mod error;
pub mod io;
pub mod optimizer;
pub mod precision;
pub mod sgrad;
pub mod tensor;

pub use error::{Error, Result};
pub use optimizer::{run, ConvergenceTrace, RunConfig, RunError, Stage, StageConfig, TraceRecord};
pub use precision::{PrecisionFormat, QuantConfig, Rounding, Scale};
pub use sgrad::{GradientSet, SampleBlock};
pub use tensor::{cp_reconstruct, relative_error, DenseTensor, FactorSet, Matrix};
