//! Query layer over gridded value functions: multilinear interpolation,
//! gradients of the interpolant, safety tests, and bit-exact persistence.
//!
//! The file format ("HJVF") is the interchange boundary for externally
//! computed value functions: magic bytes `HJVF`, `u32` version = 1, `u32`
//! ndims, per axis `{f64 lo, f64 hi, u32 count, u8 periodic}`, then `f64`
//! node values row-major with the last axis fastest. Everything is
//! little-endian.

use crate::grid::{Axis, Grid, GridError, ValueField};
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("query point has dimension {got}, field has {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("query point has a non-finite component at index {0}")]
    NonFinite(usize),
}

/// Result of an interpolation query. `extrapolated` marks queries that fell
/// outside the grid box on some non-periodic axis and were clamp-projected
/// onto it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpResult {
    pub value: f64,
    pub extrapolated: bool,
}

/// Gradient of the multilinear interpolant at a query point.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub gradient: Vec<f64>,
    pub extrapolated: bool,
}

struct AxisLocation {
    lower: usize,
    t: f64,
    clamped: bool,
}

/// Locate the cell containing `x` along one axis. At cell boundaries the
/// cell with the lower index is used (local coordinate 1), so exact node
/// hits reproduce node values and the gradient convention is well defined.
fn locate(ax: &Axis, x: f64) -> AxisLocation {
    let dx = ax.spacing();
    if ax.periodic {
        let period = ax.hi - ax.lo;
        let s = (x - ax.lo).rem_euclid(period) / dx;
        let mut lower = s.floor() as usize;
        let mut t = s - lower as f64;
        if lower >= ax.count {
            // rem_euclid can land exactly on the period for values just
            // below a multiple of it.
            lower = 0;
            t = 0.0;
        }
        if t == 0.0 {
            lower = (lower + ax.count - 1) % ax.count;
            t = 1.0;
        }
        AxisLocation { lower, t, clamped: false }
    } else {
        let s = (x - ax.lo) / dx;
        let top = (ax.count - 1) as f64;
        if s <= 0.0 {
            AxisLocation { lower: 0, t: 0.0, clamped: s < 0.0 }
        } else if s >= top {
            AxisLocation { lower: ax.count - 2, t: 1.0, clamped: s > top }
        } else {
            let j = s.floor() as usize;
            let t = s - j as f64;
            if t == 0.0 {
                AxisLocation { lower: j - 1, t: 1.0, clamped: false }
            } else {
                AxisLocation { lower: j, t, clamped: false }
            }
        }
    }
}

fn check_query(field: &ValueField, x: &[f64]) -> Result<(), QueryError> {
    let n = field.grid().ndims();
    if x.len() != n {
        return Err(QueryError::DimMismatch { expected: n, got: x.len() });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(QueryError::NonFinite(i));
    }
    Ok(())
}

fn corner_sweep(field: &ValueField, x: &[f64], mut grad: Option<&mut [f64]>) -> InterpResult {
    let grid = field.grid();
    let n = grid.ndims();
    debug_assert!(n <= 16, "corner sweep is exponential in ndims");
    let mut lows = [0usize; 16];
    let mut ups = [0usize; 16];
    let mut ts = [0.0f64; 16];
    let mut extrapolated = false;
    for (i, ax) in grid.axes().iter().enumerate() {
        let loc = locate(ax, x[i]);
        lows[i] = loc.lower;
        ups[i] = if ax.periodic { (loc.lower + 1) % ax.count } else { loc.lower + 1 };
        ts[i] = loc.t;
        extrapolated |= loc.clamped;
    }
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let strides = grid.strides();
    let values = field.values();
    let mut value = 0.0;
    for corner in 0..(1usize << n) {
        let mut w = 1.0;
        let mut flat = 0;
        for i in 0..n {
            if corner & (1 << i) != 0 {
                w *= ts[i];
                flat += ups[i] * strides[i];
            } else {
                w *= 1.0 - ts[i];
                flat += lows[i] * strides[i];
            }
        }
        let v = values[flat];
        value += w * v;
        if let Some(g) = grad.as_deref_mut() {
            for i in 0..n {
                let mut wi = 1.0;
                for k in 0..n {
                    if k == i {
                        continue;
                    }
                    wi *= if corner & (1 << k) != 0 { ts[k] } else { 1.0 - ts[k] };
                }
                let sign = if corner & (1 << i) != 0 { 1.0 } else { -1.0 };
                g[i] += sign * wi * v / grid.axis(i).spacing();
            }
        }
    }
    InterpResult { value, extrapolated }
}

/// Multilinear interpolation over the `2^n` nodes of the enclosing cell.
/// Periodic axes wrap; out-of-box coordinates on non-periodic axes are
/// clamped to the box and the result flagged as extrapolated.
pub fn interpolate(field: &ValueField, x: &[f64]) -> Result<InterpResult, QueryError> {
    check_query(field, x)?;
    Ok(corner_sweep(field, x, None))
}

/// Gradient of the multilinear interpolant (piecewise constant per axis
/// within a cell).
pub fn gradient(field: &ValueField, x: &[f64]) -> Result<GradientResult, QueryError> {
    check_query(field, x)?;
    let mut grad = vec![0.0; field.grid().ndims()];
    let res = corner_sweep(field, x, Some(&mut grad));
    Ok(GradientResult { gradient: grad, extrapolated: res.extrapolated })
}

/// A value field together with a safety margin: `x` is safe when the
/// interpolated value clears the margin.
#[derive(Debug, Clone)]
pub struct SafetyOracle {
    field: ValueField,
    margin: f64,
}

impl SafetyOracle {
    pub fn new(field: ValueField, margin: f64) -> Self {
        SafetyOracle { field, margin }
    }

    pub fn field(&self) -> &ValueField {
        &self.field
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    /// True iff the interpolated value at `x` is at least the margin.
    /// Non-finite queries are reported unsafe.
    pub fn is_safe(&self, x: &[f64]) -> bool {
        interpolate(&self.field, x).map(|r| r.value >= self.margin).unwrap_or(false)
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, QueryError> {
        interpolate(&self.field, x).map(|r| r.value)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, QueryError> {
        gradient(&self.field, x).map(|r| r.gradient)
    }
}

const MAGIC: [u8; 4] = *b"HJVF";
const FORMAT_VERSION: u32 = 1;
const MAX_NDIMS: u32 = 64;

#[derive(Debug, Error)]
pub enum HjvfError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes {0:?}, expected \"HJVF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}, this build reads version 1")]
    UnsupportedVersion(u32),
    #[error("payload has {got} values but the header promises {expected}")]
    Truncated { expected: usize, got: usize },
    #[error("header truncated while reading {0}")]
    HeaderTruncated(&'static str),
    #[error("header declares {0} axes, which exceeds the supported maximum")]
    TooManyAxes(u32),
    #[error("invalid field: {0}")]
    InvalidField(#[from] GridError),
}

/// Write a field in the HJVF format. `load(save(f)) == f` bit-exactly.
pub fn save(field: &ValueField, path: impl AsRef<Path>) -> Result<(), HjvfError> {
    let mut w = io::BufWriter::new(File::create(path)?);
    save_to(field, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn save_to(field: &ValueField, w: &mut impl Write) -> Result<(), HjvfError> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(field.grid().ndims() as u32).to_le_bytes())?;
    for ax in field.grid().axes() {
        w.write_all(&ax.lo.to_le_bytes())?;
        w.write_all(&ax.hi.to_le_bytes())?;
        w.write_all(&(ax.count as u32).to_le_bytes())?;
        w.write_all(&[ax.periodic as u8])?;
    }
    for v in field.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ValueField, HjvfError> {
    let mut r = io::BufReader::new(File::open(path)?);
    load_from(&mut r)
}

fn read_exact_or<const N: usize>(
    r: &mut impl Read,
    what: &'static str,
) -> Result<[u8; N], HjvfError> {
    let mut buf = [0u8; N];
    let mut filled = 0;
    while filled < N {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(HjvfError::HeaderTruncated(what));
        }
        filled += n;
    }
    Ok(buf)
}

pub fn load_from(r: &mut impl Read) -> Result<ValueField, HjvfError> {
    let magic: [u8; 4] = read_exact_or(r, "magic")?;
    if magic != MAGIC {
        return Err(HjvfError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(read_exact_or(r, "version")?);
    if version != FORMAT_VERSION {
        return Err(HjvfError::UnsupportedVersion(version));
    }
    let ndims = u32::from_le_bytes(read_exact_or(r, "ndims")?);
    if ndims == 0 || ndims > MAX_NDIMS {
        return Err(HjvfError::TooManyAxes(ndims));
    }
    let mut axes = Vec::with_capacity(ndims as usize);
    for _ in 0..ndims {
        let lo = f64::from_le_bytes(read_exact_or(r, "axis lo")?);
        let hi = f64::from_le_bytes(read_exact_or(r, "axis hi")?);
        let count = u32::from_le_bytes(read_exact_or(r, "axis count")?) as usize;
        let periodic = read_exact_or::<1>(r, "axis periodic")?[0] != 0;
        axes.push(Axis { lo, hi, count, periodic });
    }
    let grid = Grid::new(axes)?;
    let expected = grid.len();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 8 {
        return Err(HjvfError::Truncated { expected, got: payload.len() / 8 });
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(ValueField::new(grid, values)?)
}
