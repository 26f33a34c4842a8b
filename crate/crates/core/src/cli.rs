//! Command-line front end: synthetic data generation, decomposition runs and
//! the analysis queries. Reports are single lines of `key=value` pairs.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, StandardNormal};
use thiserror::Error;

use crate::analysis::{check_local_convexity, cost_model, gradient_cost_ratio, rank_bound, DEFAULT_RANK_TOL};
use crate::error::Error;
use crate::io::{read_factors, read_tensor, write_factors, write_tensor, write_trace, Dtype, IoError};
use crate::optimizer::{self, default_sample_fraction, sample_sizes_from_fraction, RunConfig, RunError, StageConfig};
use crate::precision::{default_divisor, PrecisionFormat, QuantConfig, Rounding, Scale};
use crate::tensor::{cp_reconstruct, fro_norm, DenseTensor, FactorSet, Matrix};

/// Default cap on the number of entries `generate` will allocate.
pub const DEFAULT_MAX_ENTRIES: usize = 1 << 27;

// Kept apart from the optimizer's streams so that generating and decomposing
// with the same seed never starts a run at the ground truth.
const STREAM_TRUTH: u64 = 16;
const STREAM_NOISE: u64 = 17;

#[derive(Debug, Parser)]
#[command(name = "mpcp", version, about = "Mixed-precision stochastic gradient CP decomposition")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic low-rank tensor and its ground-truth factors.
    Generate(GenerateArgs),
    /// Fit a CP model with the two-stage mixed-precision algorithm.
    Decompose(DecomposeArgs),
    /// Normalized cost of the FP16/INT(b) gradient relative to FP32.
    Cost(CostArgs),
    /// Rank thresholds for local strong convexity.
    Rankbound(RankboundArgs),
    /// Jacobian rank test at a set of factors.
    Convexity(ConvexityArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FactorDistribution {
    /// Uniform on [-1, 1].
    Uniform,
    /// Standard normal.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F64,
    F32,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    #[arg(long)]
    pub rank: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = FactorDistribution::Uniform)]
    pub distribution: FactorDistribution,
    /// Gaussian noise level relative to the root-mean-square entry.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    pub dtype: DtypeArg,
    #[arg(long, default_value_t = DEFAULT_MAX_ENTRIES)]
    pub max_entries: usize,
    /// Tensor output path; factors go to `<out>.factors`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// Input tensor file.
    pub input: PathBuf,
    #[arg(long)]
    pub rank: usize,
    #[arg(long, default_value = "fp16")]
    pub q1_format: PrecisionFormat,
    /// Fixed scale of the staging quantizer.
    #[arg(long, default_value_t = 1.0)]
    pub q1_scale: f64,
    #[arg(long, default_value = "int8")]
    pub q2_format: PrecisionFormat,
    #[arg(long, default_value = "deterministic")]
    pub q2_rounding: Rounding,
    /// Divisor `c` of the automatic INT scale `max|X| / c`.
    #[arg(long)]
    pub q2_divisor: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha0_sign: f64,
    #[arg(long, default_value_t = 0.3)]
    pub eta_sign: f64,
    #[arg(long, default_value_t = 1000)]
    pub k_sign: usize,
    #[arg(long, default_value_t = 0.01)]
    pub alpha_sgd: f64,
    #[arg(long, default_value_t = 1.0)]
    pub eta_sgd: f64,
    #[arg(long, default_value_t = 1000)]
    pub k_sgd: usize,
    #[arg(long, default_value_t = 0.1)]
    pub eps1: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub eps2: f64,
    /// Iteration cap per stage.
    #[arg(long, default_value_t = 20_000)]
    pub max_iters: usize,
    #[arg(long, conflicts_with = "sample_sizes")]
    pub sample_frac: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub sample_sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub init_max: f64,
    #[arg(long, default_value_t = 1)]
    pub eval_stride: usize,
    /// Start SGD directly from the random initialization.
    #[arg(long)]
    pub skip_sign: bool,
    /// Record elapsed time in the trace (makes traces non-reproducible).
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    #[arg(long)]
    pub factors_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    pub order: usize,
    pub bits: u32,
    /// Also report the exact ratio for these sample sizes.
    #[arg(long, value_delimiter = ',', requires = "rank")]
    pub sample_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub rank: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RankboundArgs {
    #[arg(required = true)]
    pub dims: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct ConvexityArgs {
    pub factors: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    pub tol: f64,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] Error),
    #[error("writing report: {0}")]
    Report(#[from] std::io::Error),
}

/// Outcome of a successful invocation, mapped to the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    MaxIters,
    Diverged,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Success => 0,
            Status::MaxIters => 2,
            Status::Diverged => 3,
        }
    }
}

/// Ground-truth factors and the tensor they generate, plus optional noise.
pub fn synthetic_instance(
    dims: &[usize],
    rank: usize,
    seed: u64,
    distribution: FactorDistribution,
    noise: f64,
) -> Result<(DenseTensor, FactorSet), Error> {
    if dims.is_empty() || dims.contains(&0) || rank == 0 {
        return Err(Error::Config("dims and rank must be positive".into()));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::Config(format!("noise level must be non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_TRUTH);
    let factors = FactorSet::new(
        dims.iter()
            .map(|&d| {
                Matrix::from_fn(d, rank, |_, _| match distribution {
                    FactorDistribution::Uniform => rng.random_range(-1.0..=1.0),
                    FactorDistribution::Normal => StandardNormal.sample(&mut rng),
                })
            })
            .collect(),
    )?;
    let mut t = cp_reconstruct(&factors);
    if noise > 0.0 {
        let rms = fro_norm(&t) / (t.len() as f64).sqrt();
        let dist = Normal::new(0.0, noise * rms).map_err(|e| Error::Config(e.to_string()))?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        noise_rng.set_stream(STREAM_NOISE);
        let data = t.data().iter().map(|&x| x + dist.sample(&mut noise_rng)).collect();
        t = DenseTensor::new(t.dims().to_vec(), data)?;
    }
    Ok((t, factors))
}

/// Path of the ground-truth factors written next to a generated tensor.
pub fn factors_path(tensor: &Path) -> PathBuf {
    let mut s = tensor.as_os_str().to_owned();
    s.push(".factors");
    PathBuf::from(s)
}

fn q2_config(args: &DecomposeArgs) -> Result<QuantConfig, Error> {
    let format = args.q2_format.validate()?;
    let scale = match format {
        PrecisionFormat::Int(b) => Scale::Auto {
            divisor: match args.q2_divisor {
                Some(c) => c,
                None => default_divisor(b)?,
            },
        },
        _ => Scale::Fixed(1.0),
    };
    QuantConfig { format, scale, rounding: args.q2_rounding }.validate()
}

/// Builds the run configuration a `decompose` invocation describes.
pub fn run_config(args: &DecomposeArgs, dims: &[usize]) -> Result<RunConfig, Error> {
    let sample_sizes = match (&args.sample_sizes, args.sample_frac) {
        (Some(s), _) => s.clone(),
        (None, Some(frac)) => {
            if !(frac > 0.0 && frac <= 1.0) {
                return Err(Error::Config(format!("sample fraction must lie in (0, 1], got {frac}")));
            }
            sample_sizes_from_fraction(dims, frac)
        }
        (None, None) => sample_sizes_from_fraction(dims, default_sample_fraction(dims.len())),
    };
    let sign = StageConfig {
        alpha0: args.alpha0_sign,
        eta: args.eta_sign,
        decay_interval: args.k_sign,
        epsilon: args.eps1,
        max_iters: args.max_iters,
    };
    let sgd = StageConfig {
        alpha0: args.alpha_sgd,
        eta: args.eta_sgd,
        decay_interval: args.k_sgd,
        epsilon: args.eps2,
        max_iters: args.max_iters,
    };
    let cfg = RunConfig {
        rank: args.rank,
        sample_sizes,
        sign_stage: (!args.skip_sign).then_some(sign),
        sgd_stage: sgd,
        q1: QuantConfig::fixed(args.q1_format, args.q1_scale, Rounding::Deterministic).validate()?,
        q2: q2_config(args)?,
        seed: args.seed,
        init_max: args.init_max,
        eval_stride: args.eval_stride,
        record_wall_clock: args.wall_clock,
    };
    cfg.validate(dims)?;
    Ok(cfg)
}

fn generate(args: &GenerateArgs, out: &mut dyn Write) -> Result<Status, CliError> {
    let entries = args.dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    match entries {
        Some(n) if n <= args.max_entries => {}
        _ => {
            return Err(Error::Config(format!(
                "tensor with dims {:?} exceeds the {}-entry memory cap",
                args.dims, args.max_entries
            ))
            .into())
        }
    }
    let (t, f) = synthetic_instance(&args.dims, args.rank, args.seed, args.distribution, args.noise)?;
    let dtype = match args.dtype {
        DtypeArg::F64 => Dtype::F64,
        DtypeArg::F32 => Dtype::F32,
    };
    write_tensor(&args.out, &t, dtype)?;
    let fpath = factors_path(&args.out);
    write_factors(&fpath, &f)?;
    writeln!(out, "entries={} norm={:e} factors={}", t.len(), fro_norm(&t), fpath.display())?;
    Ok(Status::Success)
}

fn decompose(args: &DecomposeArgs, out: &mut dyn Write) -> Result<Status, CliError> {
    let a = read_tensor(&args.input)?;
    let cfg = run_config(args, a.dims())?;
    let (factors, trace, status) = match optimizer::run(&a, &cfg) {
        Ok((f, t)) => {
            let s = if t.converged { Status::Success } else { Status::MaxIters };
            (f, t, s)
        }
        Err(RunError::Diverged { trace, factors, .. }) => (*factors, *trace, Status::Diverged),
        Err(RunError::Invalid(e)) => return Err(e.into()),
    };
    if let Some(p) = &args.trace_out {
        write_trace(p, &trace)?;
    }
    if let Some(p) = &args.factors_out {
        write_factors(p, &factors)?;
    }
    let switch = trace.switch_iter.map_or_else(|| "none".to_string(), |s| s.to_string());
    let status_name = match status {
        Status::Success => "converged",
        Status::MaxIters => "max_iters",
        Status::Diverged => "diverged",
    };
    writeln!(
        out,
        "final_rel_error={:e} switch_iter={} iterations={} status={}",
        trace.final_error().unwrap_or(f64::NAN),
        switch,
        trace.iterations(),
        status_name
    )?;
    Ok(status)
}

/// Runs one parsed invocation, writing its report to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> Result<Status, CliError> {
    match cli.command {
        Command::Generate(args) => generate(&args, out),
        Command::Decompose(args) => decompose(&args, out),
        Command::Cost(args) => {
            let c = cost_model(args.order, args.bits)?;
            write!(out, "normalized_cost={}", c.normalized_cost)?;
            if let (Some(sizes), Some(rank)) = (&args.sample_sizes, args.rank) {
                if sizes.len() != args.order {
                    return Err(Error::Config(format!("{} sample sizes for order {}", sizes.len(), args.order)).into());
                }
                write!(out, " exact_cost={}", gradient_cost_ratio(sizes, rank, args.bits)?)?;
            }
            writeln!(out)?;
            Ok(Status::Success)
        }
        Command::Rankbound(args) => {
            let b = rank_bound(&args.dims)?;
            writeln!(out, "r3={} rm={}", b.r3, b.rm)?;
            Ok(Status::Success)
        }
        Command::Convexity(args) => {
            let f = read_factors(&args.factors)?;
            let r = check_local_convexity(&f, args.tol)?;
            writeln!(
                out,
                "rows={} cols={} sigma_min={:e} sigma_max={:e} lambda_min={:e} tol={:e} verdict={}",
                r.rows, r.cols, r.sigma_min, r.sigma_max, r.lambda_min, r.tol, r.verdict
            )?;
            Ok(Status::Success)
        }
    }
}
