//! Rectilinear grids and the scalar fields stored on them.
//!
//! Values are laid out row-major with the last axis fastest, matching the
//! on-disk layout used by [`crate::valuefn`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("grid must have at least one axis")]
    NoAxes,
    #[error("axis {axis}: lo ({lo}) must be strictly below hi ({hi})")]
    BadExtent { axis: usize, lo: f64, hi: f64 },
    #[error("axis {axis}: node count {count} is below the minimum of 2")]
    BadCount { axis: usize, count: usize },
    #[error("total node count overflows usize")]
    TooManyNodes,
    #[error("value array has {got} entries but the grid has {expected} nodes")]
    LengthMismatch { expected: usize, got: usize },
    #[error("value array contains a non-finite entry at index {index}")]
    NonFiniteValue { index: usize },
}

/// One grid axis. Periodic axes identify `hi` with `lo`, so their nodes
/// cover `[lo, hi)` and the spacing divides the full period by `count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    #[serde(default)]
    pub periodic: bool,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, count: usize) -> Self {
        Axis { lo, hi, count, periodic: false }
    }

    pub fn periodic(lo: f64, hi: f64, count: usize) -> Self {
        Axis { lo, hi, count, periodic: true }
    }

    pub fn spacing(&self) -> f64 {
        if self.periodic {
            (self.hi - self.lo) / self.count as f64
        } else {
            (self.hi - self.lo) / (self.count - 1) as f64
        }
    }

    /// Coordinate of node `i` along this axis.
    pub fn coord(&self, i: usize) -> f64 {
        self.lo + self.spacing() * i as f64
    }
}

/// An n-dimensional rectilinear grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    axes: Vec<Axis>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(axes: Vec<Axis>) -> Result<Self, GridError> {
        if axes.is_empty() {
            return Err(GridError::NoAxes);
        }
        for (i, ax) in axes.iter().enumerate() {
            if !(ax.lo < ax.hi) || !ax.lo.is_finite() || !ax.hi.is_finite() {
                return Err(GridError::BadExtent { axis: i, lo: ax.lo, hi: ax.hi });
            }
            if ax.count < 2 {
                return Err(GridError::BadCount { axis: i, count: ax.count });
            }
        }
        let mut strides = vec![0usize; axes.len()];
        let mut len = 1usize;
        for i in (0..axes.len()).rev() {
            strides[i] = len;
            len = len.checked_mul(axes[i].count).ok_or(GridError::TooManyNodes)?;
        }
        Ok(Grid { axes, strides, len })
    }

    pub fn ndims(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn axis(&self, i: usize) -> &Axis {
        &self.axes[i]
    }

    /// Stride of each axis in the flat value array (last axis has stride 1).
    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        debug_assert_eq!(multi.len(), self.ndims());
        multi.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn multi_index(&self, flat: usize, out: &mut [usize]) {
        debug_assert!(flat < self.len);
        let mut rem = flat;
        for (i, s) in self.strides.iter().enumerate() {
            out[i] = rem / s;
            rem %= s;
        }
    }

    /// Coordinates of the node with the given multi-index.
    pub fn node_coords(&self, multi: &[usize], out: &mut [f64]) {
        for (i, (&j, ax)) in multi.iter().zip(&self.axes).enumerate() {
            out[i] = ax.coord(j);
        }
    }
}

/// Scalar node values on a [`Grid`], row-major with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    grid: Grid,
    values: Vec<f64>,
}

impl ValueField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::LengthMismatch { expected: grid.len(), got: values.len() });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFiniteValue { index });
        }
        Ok(ValueField { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        let values = vec![value; grid.len()];
        ValueField { grid, values }
    }

    /// Fill from a function of node coordinates.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self, GridError> {
        let n = grid.ndims();
        let mut multi = vec![0usize; n];
        let mut coords = vec![0.0; n];
        let mut values = Vec::with_capacity(grid.len());
        for flat in 0..grid.len() {
            grid.multi_index(flat, &mut multi);
            grid.node_coords(&multi, &mut coords);
            values.push(f(&coords));
        }
        ValueField::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_parts(self) -> (Grid, Vec<f64>) {
        (self.grid, self.values)
    }

    pub fn at(&self, multi: &[usize]) -> f64 {
        self.values[self.grid.flat_index(multi)]
    }
}
