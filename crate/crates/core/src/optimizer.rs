//! Two-stage mixed-precision driver: SignSGD until the relative error drops
//! below a loose threshold, then SGD with the leading row of factors `2..m`
//! frozen until a tight threshold (or an iteration cap) is reached.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::error::Error;
use crate::precision::QuantConfig;
use crate::sgrad::{block_gradient_mixed, sample_block, GradientSet};
use crate::tensor::{fro_norm, relative_error, DenseTensor, FactorSet, Matrix};

/// Relative errors above this abort a run.
pub const DIVERGENCE_THRESHOLD: f64 = 1e3;

const STREAM_INIT: u64 = 0;
const STREAM_SAMPLING: u64 = 1;
const STREAM_ROUNDING: u64 = 2;

/// Learning-rate schedule and stopping rule for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub alpha0: f64,
    /// Decay multiplier applied every `decay_interval` stage iterations.
    pub eta: f64,
    pub decay_interval: usize,
    /// Stop once the relative error is at or below this.
    pub epsilon: f64,
    pub max_iters: usize,
}

impl StageConfig {
    pub fn sign_default() -> Self {
        StageConfig { alpha0: 0.5, eta: 0.3, decay_interval: 1000, epsilon: 0.1, max_iters: 20_000 }
    }

    pub fn sgd_default() -> Self {
        StageConfig { alpha0: 0.01, eta: 1.0, decay_interval: 1000, epsilon: 1e-3, max_iters: 20_000 }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !(self.alpha0.is_finite() && self.alpha0 > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.alpha0)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Config(format!("decay multiplier must lie in (0, 1], got {}", self.eta)));
        }
        if self.decay_interval == 0 {
            return Err(Error::Config("decay interval must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("stopping threshold must be positive, got {}", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Full configuration of a decomposition run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub rank: usize,
    pub sample_sizes: Vec<usize>,
    /// `None` skips the SignSGD stage and starts SGD from the initial point.
    pub sign_stage: Option<StageConfig>,
    pub sgd_stage: StageConfig,
    pub q1: QuantConfig,
    pub q2: QuantConfig,
    pub seed: u64,
    /// Initial factor entries are uniform on `[-init_max, init_max]`.
    pub init_max: f64,
    /// Iterations between relative-error evaluations.
    pub eval_stride: usize,
    /// Record elapsed wall-clock time in the trace. Off by default so traces
    /// are reproducible byte for byte.
    pub record_wall_clock: bool,
}

/// Fraction of each dimension sampled per iteration for a tensor of the given
/// order: 0.2, 0.3, 0.4 for orders 3, 4, 5 (clamped outside that range).
pub fn default_sample_fraction(order: usize) -> f64 {
    match order {
        0..=3 => 0.2,
        4 => 0.3,
        _ => 0.4,
    }
}

/// `max(1, round(fraction * N_i))` per mode.
pub fn sample_sizes_from_fraction(dims: &[usize], fraction: f64) -> Vec<usize> {
    dims.iter().map(|&d| ((fraction * d as f64).round() as usize).clamp(1, d)).collect()
}

impl RunConfig {
    /// Two-stage defaults with an INT8 product quantizer and FP16 staging.
    pub fn new(dims: &[usize], rank: usize) -> Self {
        RunConfig {
            rank,
            sample_sizes: sample_sizes_from_fraction(dims, default_sample_fraction(dims.len())),
            sign_stage: Some(StageConfig::sign_default()),
            sgd_stage: StageConfig::sgd_default(),
            q1: QuantConfig::fp16(),
            q2: QuantConfig::int_auto(8).expect("int8 has a default divisor"),
            seed: 0,
            init_max: 1.0,
            eval_stride: 1,
            record_wall_clock: false,
        }
    }

    pub fn validate(&self, dims: &[usize]) -> Result<(), Error> {
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if self.sample_sizes.len() != dims.len() {
            return Err(Error::Config(format!(
                "{} sample sizes for an order-{} tensor",
                self.sample_sizes.len(),
                dims.len()
            )));
        }
        for (mode, (&n, &d)) in self.sample_sizes.iter().zip(dims).enumerate() {
            if n == 0 || n > d {
                return Err(Error::SampleSize { mode, size: n, dim: d });
            }
        }
        self.sgd_stage.validate()?;
        if let Some(sign) = &self.sign_stage {
            sign.validate()?;
            if sign.epsilon <= self.sgd_stage.epsilon {
                return Err(Error::Config(format!(
                    "sign-stage threshold {} must exceed SGD threshold {}",
                    sign.epsilon, self.sgd_stage.epsilon
                )));
            }
        }
        self.q1.validate()?;
        self.q2.validate()?;
        if !(self.init_max.is_finite() && self.init_max > 0.0) {
            return Err(Error::Config(format!("init max magnitude must be positive, got {}", self.init_max)));
        }
        if self.eval_stride == 0 {
            return Err(Error::Config("eval_stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Sign,
    Sgd,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Sign => "sign",
            Stage::Sgd => "sgd",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "sign" => Ok(Stage::Sign),
            "sgd" => Ok(Stage::Sgd),
            _ => Err(Error::Config(format!("unknown stage {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub stage: Stage,
    /// Learning rate in effect for the next step.
    pub alpha: f64,
    pub rel_error: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceTrace {
    pub records: Vec<TraceRecord>,
    /// Iteration at which SGD took over; set once the sign stage ends.
    pub switch_iter: Option<usize>,
    /// Whether the SGD threshold was reached.
    pub converged: bool,
}

impl ConvergenceTrace {
    pub fn final_error(&self) -> Option<f64> {
        self.records.last().map(|r| r.rel_error)
    }

    pub fn iterations(&self) -> usize {
        self.records.last().map_or(0, |r| r.iter)
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Invalid(#[from] Error),

    #[error("diverged at iteration {iter}: relative error {rel_error}")]
    Diverged { iter: usize, rel_error: f64, trace: Box<ConvergenceTrace>, factors: Box<FactorSet> },
}

/// Factors with i.i.d. entries uniform on `[-max_magnitude, max_magnitude]`.
pub fn init_factors<R: Rng + ?Sized>(
    dims: &[usize],
    rank: usize,
    max_magnitude: f64,
    rng: &mut R,
) -> Result<FactorSet, Error> {
    if !(max_magnitude.is_finite() && max_magnitude > 0.0) {
        return Err(Error::Config(format!("max magnitude must be positive, got {max_magnitude}")));
    }
    FactorSet::new(
        dims.iter()
            .map(|&d| Matrix::from_fn(d, rank, |_, _| rng.random_range(-max_magnitude..=max_magnitude)))
            .collect(),
    )
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `U_i <- U_i - alpha * sign(g_i)` on every factor; zero entries stay put.
pub fn signsgd_step(f: &FactorSet, grad: &GradientSet, alpha: f64) -> Result<FactorSet, Error> {
    grad.check_compatible(f)?;
    let mut out = f.clone();
    for k in 0..f.order() {
        let g = grad.grad(k);
        for (u, &gv) in out.factor_mut(k).data_mut().iter_mut().zip(g.data()) {
            *u -= alpha * sign(gv);
        }
    }
    Ok(out)
}

/// `U_1 <- U_1 - alpha * g_1`; for `i >= 2` only rows `2..N_i` move.
pub fn sgd_step(f: &FactorSet, grad: &GradientSet, alpha: f64) -> Result<FactorSet, Error> {
    grad.check_compatible(f)?;
    let mut out = f.clone();
    for k in 0..f.order() {
        let g = grad.grad(k);
        let r = g.cols();
        let skip = if k == 0 { 0 } else { r };
        for (u, &gv) in out.factor_mut(k).data_mut().iter_mut().zip(g.data()).skip(skip) {
            *u -= alpha * gv;
        }
    }
    Ok(out)
}

/// Decays `alpha` by `eta` whenever the stage-local iteration count (counted
/// after the step, from 1) is a multiple of the decay interval.
pub fn schedule_alpha(alpha: f64, stage_iter: usize, cfg: &StageConfig) -> f64 {
    if stage_iter > 0 && stage_iter % cfg.decay_interval == 0 {
        cfg.eta * alpha
    } else {
        alpha
    }
}

/// Snapshot handed to a run observer after every update.
#[derive(Debug)]
pub struct StepEvent<'a> {
    /// Global iteration count after the update.
    pub iter: usize,
    pub stage: Stage,
    /// Learning rate used for this update.
    pub alpha: f64,
    pub factors: &'a FactorSet,
}

/// Runs the two-stage algorithm.
pub fn run(a: &DenseTensor, cfg: &RunConfig) -> Result<(FactorSet, ConvergenceTrace), RunError> {
    run_observed(a, cfg, |_| {})
}

/// [`run`] with a callback invoked after every factor update.
pub fn run_observed(
    a: &DenseTensor,
    cfg: &RunConfig,
    mut observe: impl FnMut(&StepEvent<'_>),
) -> Result<(FactorSet, ConvergenceTrace), RunError> {
    cfg.validate(a.dims())?;
    if fro_norm(a) == 0.0 {
        return Err(Error::ZeroNorm.into());
    }
    let mut init_rng = stream(cfg.seed, STREAM_INIT);
    let factors = init_factors(a.dims(), cfg.rank, cfg.init_max, &mut init_rng)?;
    run_from(a, cfg, factors, &mut observe)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Driver<'a> {
    a: &'a DenseTensor,
    cfg: &'a RunConfig,
    sampling: ChaCha8Rng,
    rounding: ChaCha8Rng,
    start: Instant,
    trace: ConvergenceTrace,
    factors: FactorSet,
    iter: usize,
    last_error: f64,
}

impl Driver<'_> {
    fn evaluate(&mut self, stage: Stage, alpha: f64) -> Result<(), RunError> {
        let err = relative_error(self.a, &self.factors)?;
        let wall_ms = if self.cfg.record_wall_clock { self.start.elapsed().as_secs_f64() * 1e3 } else { 0.0 };
        self.trace.records.push(TraceRecord { iter: self.iter, stage, alpha, rel_error: err, wall_ms });
        self.last_error = err;
        if !err.is_finite() || err > DIVERGENCE_THRESHOLD {
            return Err(RunError::Diverged {
                iter: self.iter,
                rel_error: err,
                trace: Box::new(std::mem::take(&mut self.trace)),
                factors: Box::new(self.factors.clone()),
            });
        }
        Ok(())
    }

    fn gradient(&mut self) -> Result<GradientSet, Error> {
        let block = sample_block(self.a.dims(), &self.cfg.sample_sizes, &mut self.sampling)?;
        block_gradient_mixed(self.a, &self.factors, &block, &self.cfg.q1, &self.cfg.q2, &mut self.rounding)
    }

    fn run_stage(
        &mut self,
        stage: Stage,
        sc: &StageConfig,
        observe: &mut dyn FnMut(&StepEvent<'_>),
    ) -> Result<(), RunError> {
        let mut alpha = sc.alpha0;
        let mut stage_iter = 0;
        while self.last_error > sc.epsilon && stage_iter < sc.max_iters {
            let grad = self.gradient()?;
            self.factors = match stage {
                Stage::Sign => signsgd_step(&self.factors, &grad, alpha)?,
                Stage::Sgd => sgd_step(&self.factors, &grad, alpha)?,
            };
            self.iter += 1;
            stage_iter += 1;
            observe(&StepEvent { iter: self.iter, stage, alpha, factors: &self.factors });
            alpha = schedule_alpha(alpha, stage_iter, sc);
            if self.iter % self.cfg.eval_stride == 0 || stage_iter == sc.max_iters {
                self.evaluate(stage, alpha)?;
            }
        }
        // With a stride the loop can leave on a stale error; settle it here.
        if self.trace.records.last().map(|r| r.iter) != Some(self.iter) {
            self.evaluate(stage, alpha)?;
        }
        Ok(())
    }
}

/// Runs the algorithm from explicit initial factors.
pub fn run_from(
    a: &DenseTensor,
    cfg: &RunConfig,
    init: FactorSet,
    observe: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<(FactorSet, ConvergenceTrace), RunError> {
    cfg.validate(a.dims())?;
    init.check_dims(a.dims())?;
    if init.rank() != cfg.rank {
        return Err(Error::Config(format!("initial factors have rank {}, expected {}", init.rank(), cfg.rank)).into());
    }
    let mut d = Driver {
        a,
        cfg,
        sampling: stream(cfg.seed, STREAM_SAMPLING),
        rounding: stream(cfg.seed, STREAM_ROUNDING),
        start: Instant::now(),
        trace: ConvergenceTrace::default(),
        factors: init,
        iter: 0,
        last_error: f64::INFINITY,
    };
    let first_stage = if cfg.sign_stage.is_some() { Stage::Sign } else { Stage::Sgd };
    let first_alpha = cfg.sign_stage.as_ref().unwrap_or(&cfg.sgd_stage).alpha0;
    d.evaluate(first_stage, first_alpha)?;

    if let Some(sign_cfg) = &cfg.sign_stage {
        d.run_stage(Stage::Sign, sign_cfg, observe)?;
    }
    d.trace.switch_iter = Some(d.iter);
    d.run_stage(Stage::Sgd, &cfg.sgd_stage, observe)?;
    d.trace.converged = d.last_error <= cfg.sgd_stage.epsilon;
    Ok((d.factors, d.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sgrad::block_gradient_full;
    use crate::tensor::cp_reconstruct;

    fn rank1(u: &[f64], v: &[f64]) -> FactorSet {
        FactorSet::new(vec![
            Matrix::from_vec(u.len(), 1, u.to_vec()).unwrap(),
            Matrix::from_vec(v.len(), 1, v.to_vec()).unwrap(),
        ])
        .unwrap()
    }

    fn grads(f: &FactorSet, fill: impl Fn(usize, usize, usize) -> f64) -> GradientSet {
        GradientSet::new(
            f.factors().iter().enumerate().map(|(k, u)| Matrix::from_fn(u.rows(), u.cols(), |i, j| fill(k, i, j))).collect(),
            f.factors().iter().map(|u| (0..u.rows()).collect()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_bounded_and_replayable() {
        let a = init_factors(&[5, 4, 3], 3, 1.0, &mut stream(9, 0)).unwrap();
        let b = init_factors(&[5, 4, 3], 3, 1.0, &mut stream(9, 0)).unwrap();
        assert_eq!(a, b);
        assert!(a.factors().iter().all(|u| u.data().iter().all(|x| x.abs() <= 1.0)));
        assert!(init_factors(&[2], 1, 0.0, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn init_mean_is_zero() {
        let f = init_factors(&[100_000], 1, 1.0, &mut stream(3, 0)).unwrap();
        let n = 100_000.0;
        let mean = f.factor(0).data().iter().sum::<f64>() / n;
        let se = (1.0f64 / 3.0 / n).sqrt();
        assert!(mean.abs() <= 3.0 * se, "mean {mean}");
    }

    #[test]
    fn sign_step_moves_by_alpha() {
        let f = rank1(&[1.0, 2.0], &[3.0]);
        let g = grads(&f, |_, _, _| 4.0);
        let s = signsgd_step(&f, &g, 0.5).unwrap();
        assert_eq!(s, rank1(&[0.5, 1.5], &[2.5]));

        let g = grads(&f, |_, _, _| -0.03);
        assert_eq!(signsgd_step(&f, &g, 0.5).unwrap(), rank1(&[1.5, 2.5], &[3.5]));

        let z = GradientSet::zeros_like(&f);
        assert_eq!(signsgd_step(&f, &z, 0.5).unwrap(), f);
    }

    #[test]
    fn sgd_step_freezes_leading_rows() {
        let f = rank1(&[1.0], &[1.0, 1.0]);
        let g = GradientSet::new(
            vec![Matrix::zeros(1, 1), Matrix::from_rows(&[[5.0], [5.0]])],
            vec![vec![0], vec![0, 1]],
        )
        .unwrap();
        assert_eq!(sgd_step(&f, &g, 0.1).unwrap(), rank1(&[1.0], &[1.0, 0.5]));
        assert_eq!(sgd_step(&f, &GradientSet::zeros_like(&f), 0.1).unwrap(), f);

        let f = init_factors(&[3, 4, 2], 2, 1.0, &mut stream(1, 0)).unwrap();
        let g = grads(&f, |k, i, j| (k + i + j) as f64 + 1.0);
        let s = sgd_step(&f, &g, 0.3).unwrap();
        for k in 1..3 {
            assert_eq!(s.factor(k).row(0), f.factor(k).row(0));
        }
        assert_ne!(s.factor(0).row(0), f.factor(0).row(0));
    }

    #[test]
    fn schedule_examples() {
        let cfg = StageConfig { alpha0: 0.5, eta: 0.3, decay_interval: 1000, epsilon: 0.1, max_iters: 10 };
        assert_eq!(schedule_alpha(0.5, 999, &cfg), 0.5);
        assert!((schedule_alpha(0.5, 1000, &cfg) - 0.15).abs() < 1e-16);
        let flat = StageConfig { eta: 1.0, ..cfg };
        let mut a = 0.5;
        for it in 1..5000 {
            a = schedule_alpha(a, it, &flat);
        }
        assert_eq!(a, 0.5);
    }

    #[test]
    fn stage_config_validation() {
        assert!(StageConfig::sign_default().validate().is_ok());
        assert!(StageConfig { eta: 0.0, ..StageConfig::sign_default() }.validate().is_err());
        assert!(StageConfig { eta: 1.5, ..StageConfig::sign_default() }.validate().is_err());
        assert!(StageConfig { decay_interval: 0, ..StageConfig::sign_default() }.validate().is_err());
        let mut cfg = RunConfig::new(&[4, 4, 4], 2);
        cfg.sign_stage = Some(StageConfig { epsilon: 1e-4, ..StageConfig::sign_default() });
        assert!(cfg.validate(&[4, 4, 4]).is_err());
    }

    #[test]
    fn default_sample_sizes() {
        assert_eq!(RunConfig::new(&[20, 20, 20], 5).sample_sizes, vec![4, 4, 4]);
        assert_eq!(RunConfig::new(&[10, 10, 10, 10], 5).sample_sizes, vec![3, 3, 3, 3]);
        assert_eq!(RunConfig::new(&[5, 5, 5, 5, 5], 5).sample_sizes, vec![2, 2, 2, 2, 2]);
        assert_eq!(RunConfig::new(&[2, 3, 3], 1).sample_sizes, vec![1, 1, 1]);
    }

    #[test]
    fn exact_start_returns_immediately() {
        let f = init_factors(&[4, 3, 3], 2, 1.0, &mut stream(5, STREAM_INIT)).unwrap();
        let a = cp_reconstruct(&f);
        let mut cfg = RunConfig::new(a.dims(), 2);
        cfg.seed = 5;
        let (out, trace) = run(&a, &cfg).unwrap();
        assert_eq!(out, f);
        assert_eq!(trace.records.len(), 1);
        assert_eq!(trace.switch_iter, Some(0));
        assert!(trace.converged);
    }

    #[test]
    fn zero_tensor_is_rejected() {
        let a = DenseTensor::zeros(vec![3, 3, 3]).unwrap();
        assert!(matches!(run(&a, &RunConfig::new(&[3, 3, 3], 1)), Err(RunError::Invalid(Error::ZeroNorm))));
    }

    fn small_problem(seed: u64) -> (DenseTensor, RunConfig) {
        let truth = init_factors(&[6, 5, 4], 2, 1.0, &mut stream(seed + 100, 0)).unwrap();
        let a = cp_reconstruct(&truth);
        let mut cfg = RunConfig::new(a.dims(), 2);
        cfg.seed = seed;
        cfg.sample_sizes = vec![3, 3, 2];
        cfg.sign_stage = Some(StageConfig { max_iters: 300, decay_interval: 100, ..StageConfig::sign_default() });
        cfg.sgd_stage = StageConfig { max_iters: 300, ..StageConfig::sgd_default() };
        (a, cfg)
    }

    #[test]
    fn trace_and_stage_invariants() {
        let (a, cfg) = small_problem(1);
        let mut events: Vec<(usize, Stage, f64, FactorSet)> = Vec::new();
        let (_, trace) =
            run_observed(&a, &cfg, |e| events.push((e.iter, e.stage, e.alpha, e.factors.clone()))).unwrap();
        let switch = trace.switch_iter.unwrap();
        assert!(trace.records.windows(2).all(|w| w[0].iter < w[1].iter));
        let stage_changes = trace.records.windows(2).filter(|w| w[0].stage != w[1].stage).count();
        assert!(stage_changes <= 1);
        // No SGD update before the switch, no sign update after it.
        for (iter, stage, _, _) in &events {
            assert_eq!(*stage == Stage::Sgd, *iter > switch, "iter {iter}");
        }
        // Freeze anchors to the factors at the switch.
        let anchor = events.iter().find(|e| e.0 == switch).map(|e| e.3.clone());
        if let Some(anchor) = anchor {
            for (_, stage, _, f) in events.iter().filter(|e| e.1 == Stage::Sgd) {
                assert_eq!(*stage, Stage::Sgd);
                for k in 1..3 {
                    assert_eq!(f.factor(k).row(0), anchor.factor(k).row(0));
                }
            }
        }
        // Learning rates never increase within a stage.
        for st in [Stage::Sign, Stage::Sgd] {
            let alphas: Vec<f64> = events.iter().filter(|e| e.1 == st).map(|e| e.2).collect();
            assert!(alphas.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn sign_stage_motion_is_bounded_by_step_sum() {
        let (a, cfg) = small_problem(2);
        let init = init_factors(a.dims(), cfg.rank, cfg.init_max, &mut stream(cfg.seed, STREAM_INIT)).unwrap();
        let mut budget = 0.0;
        let mut ok = true;
        run_observed(&a, &cfg, |e| {
            if e.stage == Stage::Sign {
                budget += e.alpha;
                for (u, u0) in e.factors.factors().iter().zip(init.factors()) {
                    for (x, x0) in u.data().iter().zip(u0.data()) {
                        ok &= (x - x0).abs() <= budget + 1e-12;
                    }
                }
            }
        })
        .unwrap();
        assert!(ok);
    }

    #[test]
    fn runs_replay_exactly() {
        let (a, cfg) = small_problem(3);
        let (fa, ta) = run(&a, &cfg).unwrap();
        let (fb, tb) = run(&a, &cfg).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(ta, tb);
    }

    #[test]
    fn stride_settles_final_error() {
        let (a, mut cfg) = small_problem(4);
        cfg.eval_stride = 7;
        let (f, trace) = run(&a, &cfg).unwrap();
        assert_eq!(trace.final_error().unwrap(), relative_error(&a, &f).unwrap());
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let (a, mut cfg) = small_problem(5);
        cfg.sign_stage = None;
        cfg.sgd_stage = StageConfig { alpha0: 1e4, ..StageConfig::sgd_default() };
        cfg.q2 = QuantConfig::identity();
        match run(&a, &cfg) {
            Err(RunError::Diverged { trace, .. }) => assert!(!trace.records.is_empty()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn sgd_descends_in_expectation() {
        // Perturbed ground truth, full-precision gradients, one SGD step each.
        let truth = init_factors(&[6, 5, 4], 2, 1.0, &mut stream(77, 0)).unwrap();
        let a = cp_reconstruct(&truth);
        let objective = |f: &FactorSet| relative_error(&a, f).unwrap().powi(2);
        let mut decrease = 0.0;
        for seed in 0..100 {
            let mut rng = stream(seed, 5);
            let mut start = truth.clone();
            for k in 0..3 {
                for x in start.factor_mut(k).data_mut() {
                    *x += rng.random_range(-0.05..0.05);
                }
            }
            let block = sample_block(a.dims(), &[3, 3, 2], &mut rng).unwrap();
            let g = block_gradient_full(&a, &start, &block).unwrap();
            let next = sgd_step(&start, &g, 0.05).unwrap();
            decrease += objective(&start) - objective(&next);
        }
        assert!(decrease > 0.0, "mean change {}", decrease / 100.0);
    }
}
