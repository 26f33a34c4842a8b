//! C ABI over the `mpcp` engine.
//!
//! Objects are passed as opaque handles created by `*_new`/`*_read`/`mpcp_run`
//! and released with the matching `*_free`. Every fallible function returns an
//! [`MpcpStatus`]; on failure a description is available from
//! [`mpcp_last_error_message`] on the same thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use mpcp::analysis::{check_local_convexity, cost_model, rank_bound, Verdict};
use mpcp::io::{read_factors, read_tensor, write_factors, write_tensor, write_trace, Dtype};
use mpcp::optimizer::{run, ConvergenceTrace, RunConfig, RunError, Stage, StageConfig};
use mpcp::precision::{default_divisor, PrecisionFormat, QuantConfig, Rounding, Scale};
use mpcp::tensor::{cp_reconstruct, relative_error, DenseTensor, FactorSet, Matrix};

/// Result codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcpStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Shapes, indices or configuration values were rejected.
    InvalidArgument = 2,
    /// Reading or writing a file failed, or a file was malformed.
    Io = 3,
    /// Numerical failure such as a zero-norm tensor.
    Numerical = 4,
    /// An internal panic was caught at the boundary.
    Internal = 5,
}

/// Number format selector; integer formats take their width separately.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcpFormat {
    Int = 0,
    Fp16 = 1,
    Fp32 = 2,
    Fp64 = 3,
}

/// How a decomposition run ended.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MpcpRunOutcome {
    Converged = 0,
    MaxIters = 2,
    Diverged = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcpConvexityReport {
    pub rows: usize,
    pub cols: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub lambda_min: f64,
    /// 1 when the Jacobian has full column rank at the tolerance.
    pub full_rank: i32,
}

/// Dense tensor handle.
pub struct MpcpTensor(DenseTensor);
/// CP factor matrices handle.
pub struct MpcpFactors(FactorSet);
/// Run configuration handle.
pub struct MpcpConfig(RunConfig);
/// Convergence trace handle.
pub struct MpcpTrace(ConvergenceTrace);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(MpcpStatus, String);

impl From<mpcp::Error> for Fail {
    fn from(e: mpcp::Error) -> Self {
        let code = match e {
            mpcp::Error::ZeroNorm | mpcp::Error::NonFinite(_) => MpcpStatus::Numerical,
            _ => MpcpStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

impl From<mpcp::io::IoError> for Fail {
    fn from(e: mpcp::io::IoError) -> Self {
        Fail(MpcpStatus::Io, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(MpcpStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MpcpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MpcpStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            MpcpStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(MpcpStatus::NullPointer, format!("{what} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| Fail(MpcpStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice_in<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(MpcpStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn path_in<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(MpcpStatus::NullPointer, "path is null".into()));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    let out = deref_mut(out, "output pointer")?;
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn format_of(format: MpcpFormat, bits: u32) -> Result<PrecisionFormat, Fail> {
    let p = match format {
        MpcpFormat::Int => PrecisionFormat::Int(bits),
        MpcpFormat::Fp16 => PrecisionFormat::Fp16,
        MpcpFormat::Fp32 => PrecisionFormat::Fp32,
        MpcpFormat::Fp64 => PrecisionFormat::Fp64,
    };
    Ok(p.validate()?)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length in bytes.
#[no_mangle]
pub unsafe extern "C" fn mpcp_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a tensor from `order` dimensions and a row-major buffer of
/// `prod(dims)` doubles.
#[no_mangle]
pub unsafe extern "C" fn mpcp_tensor_new(
    dims: *const usize,
    order: usize,
    data: *const f64,
    out: *mut *mut MpcpTensor,
) -> MpcpStatus {
    guard(|| {
        let dims = slice_in(dims, order, "dims")?.to_vec();
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| invalid("size overflows"))?;
        let data = slice_in(data, n, "data")?.to_vec();
        put(out, MpcpTensor(DenseTensor::new(dims, data)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_tensor_read(path: *const c_char, out: *mut *mut MpcpTensor) -> MpcpStatus {
    guard(|| put(out, MpcpTensor(read_tensor(path_in(path)?)?)))
}

/// Writes a tensor file with a 64-bit float payload.
#[no_mangle]
pub unsafe extern "C" fn mpcp_tensor_write(t: *const MpcpTensor, path: *const c_char) -> MpcpStatus {
    guard(|| Ok(write_tensor(path_in(path)?, &deref(t, "tensor")?.0, Dtype::F64)?))
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_tensor_order(t: *const MpcpTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.order())
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_tensor_len(t: *const MpcpTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Copies the dimensions into `dims`, which must hold `mpcp_tensor_order`
/// entries.
#[no_mangle]
pub unsafe extern "C" fn mpcp_tensor_dims(t: *const MpcpTensor, dims: *mut usize, len: usize) -> MpcpStatus {
    guard(|| {
        let t = &deref(t, "tensor")?.0;
        if len < t.order() || dims.is_null() {
            return Err(invalid(format!("dims buffer needs {} entries", t.order())));
        }
        ptr::copy_nonoverlapping(t.dims().as_ptr(), dims, t.order());
        Ok(())
    })
}

/// Copies the row-major entries into `data`, which must hold
/// `mpcp_tensor_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mpcp_tensor_data(t: *const MpcpTensor, data: *mut f64, len: usize) -> MpcpStatus {
    guard(|| {
        let t = &deref(t, "tensor")?.0;
        if len < t.len() || data.is_null() {
            return Err(invalid(format!("data buffer needs {} entries", t.len())));
        }
        ptr::copy_nonoverlapping(t.data().as_ptr(), data, t.len());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_tensor_free(t: *mut MpcpTensor) {
    free(t)
}

/// Creates factors for a tensor of the given dimensions. `data` holds the
/// factor matrices back to back, each `dims[k] x rank` in row-major order.
#[no_mangle]
pub unsafe extern "C" fn mpcp_factors_new(
    dims: *const usize,
    order: usize,
    rank: usize,
    data: *const f64,
    out: *mut *mut MpcpFactors,
) -> MpcpStatus {
    guard(|| {
        let dims = slice_in(dims, order, "dims")?;
        let total = dims.iter().try_fold(0usize, |a, &d| d.checked_mul(rank).and_then(|x| a.checked_add(x)));
        let data = slice_in(data, total.ok_or_else(|| invalid("size overflows"))?, "data")?;
        let mut mats = Vec::with_capacity(order);
        let mut at = 0;
        for &d in dims {
            mats.push(Matrix::from_vec(d, rank, data[at..at + d * rank].to_vec())?);
            at += d * rank;
        }
        put(out, MpcpFactors(FactorSet::new(mats)?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_factors_read(path: *const c_char, out: *mut *mut MpcpFactors) -> MpcpStatus {
    guard(|| put(out, MpcpFactors(read_factors(path_in(path)?)?)))
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_factors_write(f: *const MpcpFactors, path: *const c_char) -> MpcpStatus {
    guard(|| Ok(write_factors(path_in(path)?, &deref(f, "factors")?.0)?))
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_factors_order(f: *const MpcpFactors) -> usize {
    f.as_ref().map_or(0, |f| f.0.order())
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_factors_rank(f: *const MpcpFactors) -> usize {
    f.as_ref().map_or(0, |f| f.0.rank())
}

/// Copies factor `mode` (row-major, `rows x rank`) into `data`.
#[no_mangle]
pub unsafe extern "C" fn mpcp_factors_get(
    f: *const MpcpFactors,
    mode: usize,
    data: *mut f64,
    len: usize,
) -> MpcpStatus {
    guard(|| {
        let f = &deref(f, "factors")?.0;
        if mode >= f.order() {
            return Err(mpcp::Error::ModeIndex { mode, order: f.order() }.into());
        }
        let u = f.factor(mode);
        if len < u.data().len() || data.is_null() {
            return Err(invalid(format!("buffer needs {} entries", u.data().len())));
        }
        ptr::copy_nonoverlapping(u.data().as_ptr(), data, u.data().len());
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_factors_free(f: *mut MpcpFactors) {
    free(f)
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_cp_reconstruct(f: *const MpcpFactors, out: *mut *mut MpcpTensor) -> MpcpStatus {
    guard(|| put(out, MpcpTensor(cp_reconstruct(&deref(f, "factors")?.0))))
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_relative_error(
    t: *const MpcpTensor,
    f: *const MpcpFactors,
    out: *mut f64,
) -> MpcpStatus {
    guard(|| {
        *deref_mut(out, "output pointer")? = relative_error(&deref(t, "tensor")?.0, &deref(f, "factors")?.0)?;
        Ok(())
    })
}

/// Default two-stage configuration for the given dimensions and rank: FP16
/// staging, INT8 products, SignSGD then SGD.
#[no_mangle]
pub unsafe extern "C" fn mpcp_config_new(
    dims: *const usize,
    order: usize,
    rank: usize,
    out: *mut *mut MpcpConfig,
) -> MpcpStatus {
    guard(|| put(out, MpcpConfig(RunConfig::new(slice_in(dims, order, "dims")?, rank))))
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_config_set_seed(cfg: *mut MpcpConfig, seed: u64) -> MpcpStatus {
    guard(|| {
        deref_mut(cfg, "config")?.0.seed = seed;
        Ok(())
    })
}

/// Staging quantizer with a fixed scale.
#[no_mangle]
pub unsafe extern "C" fn mpcp_config_set_q1(
    cfg: *mut MpcpConfig,
    format: MpcpFormat,
    bits: u32,
    scale: f64,
) -> MpcpStatus {
    guard(|| {
        let q = QuantConfig::fixed(format_of(format, bits)?, scale, Rounding::Deterministic).validate()?;
        deref_mut(cfg, "config")?.0.q1 = q;
        Ok(())
    })
}

/// Product quantizer. Integer formats use the automatic scale
/// `max|X| / divisor`; a non-positive divisor selects the default for the
/// width. Float formats use unit scale. `stochastic` selects the rounding.
#[no_mangle]
pub unsafe extern "C" fn mpcp_config_set_q2(
    cfg: *mut MpcpConfig,
    format: MpcpFormat,
    bits: u32,
    stochastic: i32,
    divisor: f64,
) -> MpcpStatus {
    guard(|| {
        let format = format_of(format, bits)?;
        let scale = match format {
            PrecisionFormat::Int(_) if divisor > 0.0 => Scale::Auto { divisor },
            PrecisionFormat::Int(b) => Scale::Auto { divisor: default_divisor(b)? },
            _ => Scale::Fixed(1.0),
        };
        let rounding = if stochastic != 0 { Rounding::Stochastic } else { Rounding::Deterministic };
        deref_mut(cfg, "config")?.0.q2 = QuantConfig { format, scale, rounding }.validate()?;
        Ok(())
    })
}

fn stage(alpha0: f64, eta: f64, decay_interval: usize, epsilon: f64, max_iters: usize) -> Result<StageConfig, Fail> {
    let s = StageConfig { alpha0, eta, decay_interval, epsilon, max_iters };
    s.validate()?;
    Ok(s)
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_config_set_sign_stage(
    cfg: *mut MpcpConfig,
    alpha0: f64,
    eta: f64,
    decay_interval: usize,
    epsilon: f64,
    max_iters: usize,
) -> MpcpStatus {
    guard(|| {
        deref_mut(cfg, "config")?.0.sign_stage = Some(stage(alpha0, eta, decay_interval, epsilon, max_iters)?);
        Ok(())
    })
}

/// Starts SGD directly from the random initialization.
#[no_mangle]
pub unsafe extern "C" fn mpcp_config_skip_sign_stage(cfg: *mut MpcpConfig) -> MpcpStatus {
    guard(|| {
        deref_mut(cfg, "config")?.0.sign_stage = None;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_config_set_sgd_stage(
    cfg: *mut MpcpConfig,
    alpha0: f64,
    eta: f64,
    decay_interval: usize,
    epsilon: f64,
    max_iters: usize,
) -> MpcpStatus {
    guard(|| {
        deref_mut(cfg, "config")?.0.sgd_stage = stage(alpha0, eta, decay_interval, epsilon, max_iters)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_config_set_sample_sizes(
    cfg: *mut MpcpConfig,
    sizes: *const usize,
    order: usize,
) -> MpcpStatus {
    guard(|| {
        let sizes = slice_in(sizes, order, "sizes")?.to_vec();
        deref_mut(cfg, "config")?.0.sample_sizes = sizes;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_config_set_init_max(cfg: *mut MpcpConfig, init_max: f64) -> MpcpStatus {
    guard(|| {
        deref_mut(cfg, "config")?.0.init_max = init_max;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_config_set_eval_stride(cfg: *mut MpcpConfig, stride: usize) -> MpcpStatus {
    guard(|| {
        deref_mut(cfg, "config")?.0.eval_stride = stride;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_config_free(cfg: *mut MpcpConfig) {
    free(cfg)
}

/// Runs the decomposition. On `MPCP_STATUS_OK` the fitted factors and trace
/// are returned together with the outcome; a diverged run still returns its
/// last factors and partial trace.
#[no_mangle]
pub unsafe extern "C" fn mpcp_run(
    t: *const MpcpTensor,
    cfg: *const MpcpConfig,
    out_factors: *mut *mut MpcpFactors,
    out_trace: *mut *mut MpcpTrace,
    out_outcome: *mut MpcpRunOutcome,
) -> MpcpStatus {
    guard(|| {
        let a = &deref(t, "tensor")?.0;
        let cfg = &deref(cfg, "config")?.0;
        let outcome_slot = deref_mut(out_outcome, "outcome pointer")?;
        if out_factors.is_null() || out_trace.is_null() {
            return Err(Fail(MpcpStatus::NullPointer, "output pointer is null".into()));
        }
        let (f, tr, outcome) = match run(a, cfg) {
            Ok((f, tr)) => {
                let o = if tr.converged { MpcpRunOutcome::Converged } else { MpcpRunOutcome::MaxIters };
                (f, tr, o)
            }
            Err(RunError::Diverged { trace, factors, .. }) => (*factors, *trace, MpcpRunOutcome::Diverged),
            Err(RunError::Invalid(e)) => return Err(e.into()),
        };
        put(out_factors, MpcpFactors(f))?;
        put(out_trace, MpcpTrace(tr))?;
        *outcome_slot = outcome;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_trace_len(tr: *const MpcpTrace) -> usize {
    tr.as_ref().map_or(0, |t| t.0.records.len())
}

/// Iteration at which SGD took over, or -1 if the run never reached it.
#[no_mangle]
pub unsafe extern "C" fn mpcp_trace_switch_iter(tr: *const MpcpTrace) -> i64 {
    tr.as_ref().and_then(|t| t.0.switch_iter).map_or(-1, |s| s as i64)
}

/// Reads record `index`. `stage` receives 0 for SignSGD and 1 for SGD; any
/// output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn mpcp_trace_get(
    tr: *const MpcpTrace,
    index: usize,
    iter: *mut usize,
    stage: *mut i32,
    alpha: *mut f64,
    rel_error: *mut f64,
    wall_ms: *mut f64,
) -> MpcpStatus {
    guard(|| {
        let t = &deref(tr, "trace")?.0;
        let r = t.records.get(index).ok_or_else(|| invalid(format!("record {index} of {}", t.records.len())))?;
        if let Some(p) = iter.as_mut() {
            *p = r.iter;
        }
        if let Some(p) = stage.as_mut() {
            *p = match r.stage {
                Stage::Sign => 0,
                Stage::Sgd => 1,
            };
        }
        if let Some(p) = alpha.as_mut() {
            *p = r.alpha;
        }
        if let Some(p) = rel_error.as_mut() {
            *p = r.rel_error;
        }
        if let Some(p) = wall_ms.as_mut() {
            *p = r.wall_ms;
        }
        Ok(())
    })
}

/// Writes the trace as CSV.
#[no_mangle]
pub unsafe extern "C" fn mpcp_trace_write(tr: *const MpcpTrace, path: *const c_char) -> MpcpStatus {
    guard(|| Ok(write_trace(path_in(path)?, &deref(tr, "trace")?.0)?))
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_trace_free(tr: *mut MpcpTrace) {
    free(tr)
}

/// Normalized cost `(1 + b m / 32) / (2 + 2m)` of the FP16/INT(b) gradient.
#[no_mangle]
pub unsafe extern "C" fn mpcp_cost_model(order: usize, bits: u32, out: *mut f64) -> MpcpStatus {
    guard(|| {
        *deref_mut(out, "output pointer")? = cost_model(order, bits)?.normalized_cost;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_rank_bound(
    dims: *const usize,
    order: usize,
    out_r3: *mut usize,
    out_rm: *mut usize,
) -> MpcpStatus {
    guard(|| {
        let b = rank_bound(slice_in(dims, order, "dims")?)?;
        *deref_mut(out_r3, "r3 pointer")? = b.r3;
        *deref_mut(out_rm, "rm pointer")? = b.rm;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn mpcp_check_convexity(
    f: *const MpcpFactors,
    tol: f64,
    out: *mut MpcpConvexityReport,
) -> MpcpStatus {
    guard(|| {
        let r = check_local_convexity(&deref(f, "factors")?.0, tol)?;
        *deref_mut(out, "report pointer")? = MpcpConvexityReport {
            rows: r.rows,
            cols: r.cols,
            sigma_min: r.sigma_min,
            sigma_max: r.sigma_max,
            lambda_min: r.lambda_min,
            full_rank: i32::from(r.verdict == Verdict::FullRank),
        };
        Ok(())
    })
}
