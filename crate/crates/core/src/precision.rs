//! Emulated number formats and quantization.
//!
//! A quantizer maps `x` to `delta * v` where `v` is a representable value of
//! the target format bracketing `x / delta`. Deterministic rounding picks the
//! upper bracket when `x / delta` is at or above the bracket midpoint;
//! stochastic rounding picks it with probability proportional to proximity,
//! which keeps the quantizer unbiased. Values outside the format's range
//! saturate to the nearest finite representable.
//!
//! Integer formats are emulated in `f64`: every `INT(b)` value for the bit
//! widths used here, and every dot product of such values at desk scale, is an
//! exact integer in a 53-bit significand.

use std::fmt;
use std::str::FromStr;

use half::f16;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Largest finite FP16 value.
pub const FP16_MAX: f64 = 65504.0;
/// Smallest positive normal FP16 value, 2^-14.
pub const FP16_MIN_NORMAL: f64 = 6.103_515_625e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PrecisionFormat {
    /// Signed fixed-point integer with the given bit width, range
    /// `[-2^(b-1), 2^(b-1) - 1]`.
    Int(u32),
    Fp16,
    Fp32,
    Fp64,
}

impl PrecisionFormat {
    pub fn validate(self) -> Result<Self> {
        match self {
            PrecisionFormat::Int(b) if !(2..=32).contains(&b) => {
                Err(Error::Config(format!("integer bit width {b} outside 2..=32")))
            }
            _ => Ok(self),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            PrecisionFormat::Int(b) => b,
            PrecisionFormat::Fp16 => 16,
            PrecisionFormat::Fp32 => 32,
            PrecisionFormat::Fp64 => 64,
        }
    }

    pub fn is_int(self) -> bool {
        matches!(self, PrecisionFormat::Int(_))
    }

    /// `(exponent bits, significand bits)` for floating-point formats.
    pub fn float_layout(self) -> Option<(u32, u32)> {
        match self {
            PrecisionFormat::Int(_) => None,
            PrecisionFormat::Fp16 => Some((5, 10)),
            PrecisionFormat::Fp32 => Some((8, 23)),
            PrecisionFormat::Fp64 => Some((11, 52)),
        }
    }

    pub fn max_value(self) -> f64 {
        match self {
            PrecisionFormat::Int(b) => (2f64).powi(b as i32 - 1) - 1.0,
            PrecisionFormat::Fp16 => FP16_MAX,
            PrecisionFormat::Fp32 => f32::MAX as f64,
            PrecisionFormat::Fp64 => f64::MAX,
        }
    }

    pub fn min_value(self) -> f64 {
        match self {
            PrecisionFormat::Int(b) => -(2f64).powi(b as i32 - 1),
            other => -other.max_value(),
        }
    }

    /// Smallest positive normal number; 1 for integer formats.
    pub fn min_positive_normal(self) -> f64 {
        match self {
            PrecisionFormat::Int(_) => 1.0,
            PrecisionFormat::Fp16 => FP16_MIN_NORMAL,
            PrecisionFormat::Fp32 => f32::MIN_POSITIVE as f64,
            PrecisionFormat::Fp64 => f64::MIN_POSITIVE,
        }
    }

    /// Round to nearest with ties to even, saturating at the finite range.
    /// This is the hardware convention used when staging products, unlike
    /// the quantizer's ties-to-ceiling rule.
    pub fn round_nearest_even(self, x: f64) -> f64 {
        match self {
            PrecisionFormat::Fp16 => fp16_round(x),
            PrecisionFormat::Fp32 => {
                let max = f32::MAX as f64;
                if x > max {
                    max
                } else if x < -max {
                    -max
                } else {
                    x as f32 as f64
                }
            }
            PrecisionFormat::Fp64 => x,
            PrecisionFormat::Int(_) => {
                let r = x.round_ties_even();
                r.clamp(self.min_value(), self.max_value())
            }
        }
    }
}

impl fmt::Display for PrecisionFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrecisionFormat::Int(b) => write!(f, "int{b}"),
            PrecisionFormat::Fp16 => f.write_str("fp16"),
            PrecisionFormat::Fp32 => f.write_str("fp32"),
            PrecisionFormat::Fp64 => f.write_str("fp64"),
        }
    }
}

impl FromStr for PrecisionFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "fp16" | "f16" | "half" => Ok(PrecisionFormat::Fp16),
            "fp32" | "f32" | "single" => Ok(PrecisionFormat::Fp32),
            "fp64" | "f64" | "double" => Ok(PrecisionFormat::Fp64),
            other => other
                .strip_prefix("int")
                .and_then(|b| b.parse::<u32>().ok())
                .map(PrecisionFormat::Int)
                .ok_or_else(|| Error::Config(format!("unknown precision format {s:?}")))?
                .validate(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rounding {
    Deterministic,
    Stochastic,
}

impl FromStr for Rounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "det" | "deterministic" | "nearest" => Ok(Rounding::Deterministic),
            "stoch" | "stochastic" => Ok(Rounding::Stochastic),
            _ => Err(Error::Config(format!("unknown rounding mode {s:?}"))),
        }
    }
}

impl fmt::Display for Rounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rounding::Deterministic => "deterministic",
            Rounding::Stochastic => "stochastic",
        })
    }
}

/// How the scale factor `delta` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Fixed(f64),
    /// `delta = max|X| / divisor` per quantized operand.
    Auto { divisor: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub format: PrecisionFormat,
    pub scale: Scale,
    pub rounding: Rounding,
}

impl QuantConfig {
    /// FP64 with unit scale: the identity quantizer.
    pub fn identity() -> Self {
        QuantConfig {
            format: PrecisionFormat::Fp64,
            scale: Scale::Fixed(1.0),
            rounding: Rounding::Deterministic,
        }
    }

    pub fn fixed(format: PrecisionFormat, delta: f64, rounding: Rounding) -> Self {
        QuantConfig { format, scale: Scale::Fixed(delta), rounding }
    }

    /// FP16 with unit scale and deterministic rounding, the default for the
    /// factor staging quantizer.
    pub fn fp16() -> Self {
        QuantConfig::fixed(PrecisionFormat::Fp16, 1.0, Rounding::Deterministic)
    }

    /// `INT(bits)` with automatic per-operand scaling using the default
    /// divisor for that width.
    pub fn int_auto(bits: u32) -> Result<Self> {
        let divisor = default_divisor(bits)?;
        QuantConfig {
            format: PrecisionFormat::Int(bits),
            scale: Scale::Auto { divisor },
            rounding: Rounding::Deterministic,
        }
        .validate()
    }

    pub fn with_rounding(mut self, rounding: Rounding) -> Self {
        self.rounding = rounding;
        self
    }

    pub fn validate(self) -> Result<Self> {
        self.format.validate()?;
        match self.scale {
            Scale::Fixed(d) if !(d.is_finite() && d > 0.0) => {
                Err(Error::Config(format!("scale factor must be positive and finite, got {d}")))
            }
            Scale::Auto { divisor } => {
                if !(divisor.is_finite() && divisor > 0.0) {
                    return Err(Error::Config(format!("scale divisor must be positive, got {divisor}")));
                }
                if let PrecisionFormat::Int(b) = self.format {
                    let hi = PrecisionFormat::Int(b).max_value();
                    if divisor < hi {
                        return Err(Error::Config(format!(
                            "scale divisor {divisor} below int{b} maximum {hi}"
                        )));
                    }
                }
                Ok(self)
            }
            Scale::Fixed(_) => Ok(self),
        }
    }

    /// True when quantization is the identity on every finite input.
    pub fn is_identity(&self) -> bool {
        self.format == PrecisionFormat::Fp64 && self.scale == Scale::Fixed(1.0)
    }

    /// Resolves `delta` for quantizing `x` (auto scales look at `max|x|`).
    pub fn resolve_scale(&self, x: &Matrix) -> f64 {
        match self.scale {
            Scale::Fixed(d) => d,
            Scale::Auto { divisor } => scale_from_max(x.max_abs(), divisor),
        }
    }
}

/// Divisor `c` used for automatic INT(b) scaling.
pub fn default_divisor(bits: u32) -> Result<f64> {
    match bits {
        2 => Ok(10.0),
        4 => Ok(30.0),
        8 => Ok(200.0),
        _ => Err(Error::Config(format!("no default scale divisor for int{bits}"))),
    }
}

fn scale_from_max(max_abs: f64, divisor: f64) -> f64 {
    if max_abs == 0.0 {
        1.0
    } else {
        max_abs / divisor
    }
}

/// `delta = max|X| / c` with `c` = 10, 30, 200 for INT2, INT4, INT8; an
/// all-zero matrix gets `delta = 1`.
pub fn select_scale(x: &Matrix, bits: u32) -> Result<f64> {
    Ok(scale_from_max(x.max_abs(), default_divisor(bits)?))
}

fn f16_next_up(h: f16) -> f16 {
    let b = h.to_bits();
    if b & 0x7fff == 0 {
        f16::from_bits(0x0001)
    } else if b & 0x8000 == 0 {
        f16::from_bits(b + 1)
    } else {
        f16::from_bits(b - 1)
    }
}

fn f16_next_down(h: f16) -> f16 {
    let b = h.to_bits();
    if b & 0x7fff == 0 {
        f16::from_bits(0x8001)
    } else if b & 0x8000 == 0 {
        f16::from_bits(b - 1)
    } else {
        f16::from_bits(b + 1)
    }
}

/// Nearest FP16 value with ties to even; saturates to `±65504` and keeps
/// subnormals.
pub fn fp16_round(x: f64) -> f64 {
    if x >= FP16_MAX {
        FP16_MAX
    } else if x <= -FP16_MAX {
        -FP16_MAX
    } else {
        f16::from_f64(x).to_f64()
    }
}

/// Largest representable value `<= x`, or `-inf` when `x` is below the range.
pub fn repr_floor(x: f64, p: PrecisionFormat) -> f64 {
    let (lo, hi) = (p.min_value(), p.max_value());
    if x < lo {
        return f64::NEG_INFINITY;
    }
    if x >= hi {
        return hi;
    }
    match p {
        PrecisionFormat::Int(_) => x.floor(),
        PrecisionFormat::Fp16 => {
            let h = f16::from_f64(x);
            if h.to_f64() <= x { h.to_f64() } else { f16_next_down(h).to_f64() }
        }
        PrecisionFormat::Fp32 => {
            let s = x as f32;
            if (s as f64) <= x { s as f64 } else { s.next_down() as f64 }
        }
        PrecisionFormat::Fp64 => x,
    }
}

/// Smallest representable value `>= x`, or `+inf` when `x` is above the range.
pub fn repr_ceil(x: f64, p: PrecisionFormat) -> f64 {
    let (lo, hi) = (p.min_value(), p.max_value());
    if x > hi {
        return f64::INFINITY;
    }
    if x <= lo {
        return lo;
    }
    match p {
        PrecisionFormat::Int(_) => x.ceil(),
        PrecisionFormat::Fp16 => {
            let h = f16::from_f64(x);
            if h.to_f64() >= x { h.to_f64() } else { f16_next_up(h).to_f64() }
        }
        PrecisionFormat::Fp32 => {
            let s = x as f32;
            if (s as f64) >= x { s as f64 } else { s.next_up() as f64 }
        }
        PrecisionFormat::Fp64 => x,
    }
}

/// Deterministic rounding of an already scaled value onto `R(p)`.
fn round_det(y: f64, p: PrecisionFormat) -> f64 {
    let lo = repr_floor(y, p);
    let hi = repr_ceil(y, p);
    if lo == hi {
        return lo;
    }
    // An infinite bracket makes the midpoint infinite, which selects the
    // finite side in both directions.
    let mid = 0.5 * (lo + hi);
    if y >= mid {
        hi
    } else {
        lo
    }
}

fn round_stoch<R: Rng + ?Sized>(y: f64, p: PrecisionFormat, rng: &mut R) -> f64 {
    let lo = repr_floor(y, p);
    let hi = repr_ceil(y, p);
    if lo == hi {
        return lo;
    }
    if !lo.is_finite() || !hi.is_finite() {
        return round_det(y, p);
    }
    let p_up = (y - lo) / (hi - lo);
    if rng.random::<f64>() < p_up {
        hi
    } else {
        lo
    }
}

fn check_finite(x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(x))
    }
}

fn scalar_delta(x: f64, q: &QuantConfig) -> f64 {
    match q.scale {
        Scale::Fixed(d) => d,
        Scale::Auto { divisor } => scale_from_max(x.abs(), divisor),
    }
}

/// `Q^D_{p,delta}(x)`. Auto-scaled configs treat `x` as a 1x1 operand.
pub fn quantize_det(x: f64, q: &QuantConfig) -> Result<f64> {
    check_finite(x)?;
    let d = scalar_delta(x, q);
    Ok(d * round_det(x / d, q.format))
}

/// `Q^S_{p,delta}(x)`; out-of-range inputs saturate deterministically.
pub fn quantize_stoch<R: Rng + ?Sized>(x: f64, q: &QuantConfig, rng: &mut R) -> Result<f64> {
    check_finite(x)?;
    let d = scalar_delta(x, q);
    Ok(d * round_stoch(x / d, q.format, rng))
}

/// Quantizes with the config's own rounding mode.
pub fn quantize<R: Rng + ?Sized>(x: f64, q: &QuantConfig, rng: &mut R) -> Result<f64> {
    match q.rounding {
        Rounding::Deterministic => quantize_det(x, q),
        Rounding::Stochastic => quantize_stoch(x, q, rng),
    }
}

/// A quantized matrix kept as representable codes plus one scale factor, so
/// that products of two quantized operands can be formed on the codes and
/// rescaled once.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    pub codes: Matrix,
    pub scale: f64,
}

impl QuantizedMatrix {
    pub fn dequantize(&self) -> Matrix {
        let d = self.scale;
        self.codes.map(|c| d * c)
    }
}

/// Elementwise quantization returning codes in `R(p)` and the resolved scale.
pub fn quantize_codes<R: Rng + ?Sized>(
    x: &Matrix,
    q: &QuantConfig,
    rng: &mut R,
) -> Result<QuantizedMatrix> {
    if let Some(&bad) = x.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(bad));
    }
    let d = q.resolve_scale(x);
    let codes = match q.rounding {
        Rounding::Deterministic => x.map(|v| round_det(v / d, q.format)),
        Rounding::Stochastic => {
            let mut out = Matrix::zeros(x.rows(), x.cols());
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *o = round_stoch(v / d, q.format, rng);
            }
            out
        }
    };
    Ok(QuantizedMatrix { codes, scale: d })
}

/// Elementwise quantization; every output lies in `delta * R(p)`.
pub fn quantize_matrix<R: Rng + ?Sized>(x: &Matrix, q: &QuantConfig, rng: &mut R) -> Result<Matrix> {
    if q.is_identity() {
        if let Some(&bad) = x.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        return Ok(x.clone());
    }
    Ok(quantize_codes(x, q, rng)?.dequantize())
}
