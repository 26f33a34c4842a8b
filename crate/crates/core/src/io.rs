//! Binary tensor files and CSV convergence traces.
//!
//! A tensor file is a 16-byte header (`b"DTEN"`, version, dtype code, order,
//! each a little-endian `u32` after the magic), then `order` little-endian
//! `u64` dimensions, then the row-major payload. A factor file is a sequence
//! of order-2 tensor records, one per mode.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::error::Error;
use crate::optimizer::{ConvergenceTrace, Stage, TraceRecord};
use crate::tensor::{DenseTensor, FactorSet, Matrix};

pub const MAGIC: [u8; 4] = *b"DTEN";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const TRACE_HEADER: [&str; 5] = ["iter", "stage", "alpha", "rel_error", "wall_ms"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn code(self) -> u32 {
        match self {
            Dtype::F64 => 1,
            Dtype::F32 => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(Dtype::F64),
            2 => Some(Dtype::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed {field} at byte offset {offset}: {msg}")]
    Format { field: &'static str, offset: usize, msg: String },

    #[error(transparent)]
    Tensor(#[from] Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("trace row {row}: {msg}")]
    Trace { row: usize, msg: String },
}

fn format_err(field: &'static str, offset: usize, msg: impl Into<String>) -> IoError {
    IoError::Format { field, offset, msg: msg.into() }
}

/// Serializes one tensor record.
pub fn encode_tensor(dims: &[usize], data: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * dims.len() + data.len() * dtype.size());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.code().to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        Dtype::F64 => data.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Dtype::F32 => data.iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format_err(field, self.pos, format!("need {n} bytes, {} remain", self.buf.len() - self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

/// Parses one tensor record starting at the cursor; offsets in errors are
/// relative to the start of the whole buffer.
fn decode_record(cur: &mut Cursor<'_>) -> Result<(DenseTensor, Dtype), IoError> {
    let start = cur.pos;
    if cur.take(4, "magic")? != MAGIC {
        return Err(format_err("magic", start, "expected \"DTEN\""));
    }
    let off = cur.pos;
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(format_err("version", off, format!("unsupported version {version}")));
    }
    let off = cur.pos;
    let code = cur.u32("dtype")?;
    let dtype = Dtype::from_code(code).ok_or_else(|| format_err("dtype", off, format!("unknown code {code}")))?;
    let off = cur.pos;
    let order = cur.u32("order")? as usize;
    if order == 0 {
        return Err(format_err("order", off, "order must be at least 1"));
    }
    let mut dims = Vec::with_capacity(order.min(64));
    let mut count: usize = 1;
    for _ in 0..order {
        let off = cur.pos;
        let d = cur.u64("dims")?;
        let d = usize::try_from(d).ok().filter(|&d| d > 0).ok_or_else(|| format_err("dims", off, format!("bad dimension {d}")))?;
        count = count.checked_mul(d).ok_or_else(|| format_err("dims", off, "entry count overflows"))?;
        dims.push(d);
    }
    let off = cur.pos;
    let nbytes = count.checked_mul(dtype.size()).ok_or_else(|| format_err("payload", off, "size overflows"))?;
    let raw = cur.take(nbytes, "payload")?;
    let data: Vec<f64> = match dtype {
        Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
        Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect(),
    };
    Ok((DenseTensor::new(dims, data)?, dtype))
}

/// Parses a buffer holding exactly one tensor record.
pub fn decode_tensor(buf: &[u8]) -> Result<DenseTensor, IoError> {
    let mut cur = Cursor { buf, pos: 0 };
    let (t, _) = decode_record(&mut cur)?;
    if cur.pos != buf.len() {
        return Err(format_err("payload", cur.pos, format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &DenseTensor, dtype: Dtype) -> Result<(), IoError> {
    fs::write(path, encode_tensor(t.dims(), t.data(), dtype))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor, IoError> {
    decode_tensor(&fs::read(path)?)
}

pub fn encode_factors(f: &FactorSet) -> Vec<u8> {
    f.factors().iter().flat_map(|u| encode_tensor(&[u.rows(), u.cols()], u.data(), Dtype::F64)).collect()
}

pub fn decode_factors(buf: &[u8]) -> Result<FactorSet, IoError> {
    let mut cur = Cursor { buf, pos: 0 };
    let mut mats = Vec::new();
    while cur.pos < buf.len() {
        let start = cur.pos;
        let (t, _) = decode_record(&mut cur)?;
        if t.order() != 2 {
            return Err(format_err("order", start + 12, format!("factor record has order {}", t.order())));
        }
        let (rows, cols) = (t.dims()[0], t.dims()[1]);
        mats.push(Matrix::from_vec(rows, cols, t.into_data())?);
    }
    if mats.is_empty() {
        return Err(format_err("magic", 0, "empty factor file"));
    }
    Ok(FactorSet::new(mats)?)
}

pub fn write_factors(path: impl AsRef<Path>, f: &FactorSet) -> Result<(), IoError> {
    fs::write(path, encode_factors(f))?;
    Ok(())
}

pub fn read_factors(path: impl AsRef<Path>) -> Result<FactorSet, IoError> {
    decode_factors(&fs::read(path)?)
}

/// Writes one CSV row per evaluation. Floats use 17 significant digits so
/// they read back exactly.
pub fn write_trace_to<W: Write>(w: W, trace: &ConvergenceTrace) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TRACE_HEADER)?;
    for r in &trace.records {
        wtr.write_record([
            r.iter.to_string(),
            r.stage.to_string(),
            format!("{:.16e}", r.alpha),
            format!("{:.16e}", r.rel_error),
            format!("{:.16e}", r.wall_ms),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_trace(path: impl AsRef<Path>, trace: &ConvergenceTrace) -> Result<(), IoError> {
    write_trace_to(fs::File::create(path)?, trace)
}

/// Parses a trace. The switch iteration is the last sign-stage iteration
/// (0 when the sign stage was skipped); `converged` is left false because the
/// threshold is not part of the file.
pub fn read_trace_from<R: Read>(r: R) -> Result<ConvergenceTrace, IoError> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(TRACE_HEADER) {
        return Err(IoError::Trace { row: 0, msg: format!("expected header {}", TRACE_HEADER.join(",")) });
    }
    let mut trace = ConvergenceTrace::default();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let bad = |msg: String| IoError::Trace { row, msg };
        if rec.len() != TRACE_HEADER.len() {
            return Err(bad(format!("{} fields", rec.len())));
        }
        let float = |k: usize| rec[k].parse::<f64>().map_err(|e| bad(format!("{}: {e}", TRACE_HEADER[k])));
        let record = TraceRecord {
            iter: rec[0].parse().map_err(|e| bad(format!("iter: {e}")))?,
            stage: rec[1].parse::<Stage>().map_err(|e| bad(e.to_string()))?,
            alpha: float(2)?,
            rel_error: float(3)?,
            wall_ms: float(4)?,
        };
        if let Some(prev) = trace.records.last() {
            if record.iter <= prev.iter {
                return Err(bad(format!("iteration {} does not increase", record.iter)));
            }
            if prev.stage == Stage::Sgd && record.stage == Stage::Sign {
                return Err(bad("sign record after the SGD stage began".into()));
            }
        }
        trace.records.push(record);
    }
    if !trace.records.is_empty() {
        trace.switch_iter =
            Some(trace.records.iter().rev().find(|r| r.stage == Stage::Sign).map_or(0, |r| r.iter));
    }
    Ok(trace)
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<ConvergenceTrace, IoError> {
    read_trace_from(fs::File::open(path)?)
}
