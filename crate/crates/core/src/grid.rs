//! Grid containers: measurement grids and per-location categorical distributions.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, PimError, Result};

/// An `height x width` grid of `dim`-dimensional real measurements, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalGrid {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl SignalGrid {
    /// Builds a grid from row-major values (`(i * width + j) * dim + d`).
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(PimError::InvalidInput(format!(
                "grid dimensions must be positive, got {height}x{width}x{dim}"
            )));
        }
        if values.len() != height * width * dim {
            return Err(PimError::InvalidInput(format!(
                "expected {} values for a {height}x{width}x{dim} grid, got {}",
                height * width * dim,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(PimError::InvalidInput(format!(
                "non-finite measurement at flat index {pos}"
            )));
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    /// Builds a grid by evaluating `f(i, j, d)` at every cell.
    pub fn from_fn(
        height: usize,
        width: usize,
        dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width * dim);
        for i in 0..height {
            for j in 0..width {
                for d in 0..dim {
                    values.push(f(i, j, d));
                }
            }
        }
        Self::new(height, width, dim, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of locations, `height * width`.
    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Measurement vector at flat location `loc = i * width + j`.
    #[inline]
    pub fn at(&self, loc: usize) -> &[f64] {
        &self.values[loc * self.dim..(loc + 1) * self.dim]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        self.at(i * self.width + j)
    }

    /// Applies `f(value, d)` to every measurement component.
    pub fn map(&self, mut f: impl FnMut(f64, usize) -> f64) -> Result<Self> {
        let dim = self.dim;
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(n, &v)| f(v, n % dim))
            .collect();
        Self::new(self.height, self.width, self.dim, values)
    }

    /// One row `i` as a `1 x width` grid.
    pub fn row(&self, i: usize) -> Self {
        let start = i * self.width * self.dim;
        let end = start + self.width * self.dim;
        Self {
            height: 1,
            width: self.width,
            dim: self.dim,
            values: self.values[start..end].to_vec(),
        }
    }

    /// Per-dimension mean over all locations.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for loc in 0..self.locations() {
            for (m, &x) in mean.iter_mut().zip(self.at(loc)) {
                *m += x;
            }
        }
        let n = self.locations() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// Per-dimension (biased) variance over all locations.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut var = vec![0.0; self.dim];
        for loc in 0..self.locations() {
            for ((v, &x), &m) in var.iter_mut().zip(self.at(loc)).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let n = self.locations() as f64;
        var.iter_mut().for_each(|v| *v /= n);
        var
    }

    /// Shape check against another grid, including the measurement dimension.
    pub fn ensure_same_shape(&self, other: &SignalGrid) -> Result<()> {
        self.ensure_dims(other.height, other.width)?;
        if self.dim != other.dim {
            return Err(mismatch("signal grids", "dim", self.dim, other.dim));
        }
        Ok(())
    }

    pub(crate) fn ensure_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height {
            return Err(mismatch("grid", "height", self.height, height));
        }
        if self.width != width {
            return Err(mismatch("grid", "width", self.width, width));
        }
        Ok(())
    }
}

/// Per-location categorical distributions over `size` palette indices.
///
/// The same container holds the shared index prior `p_ij(s)`, the per-signal
/// posteriors `q(s_ij)`, and soft entry-indicator stacks used when scoring
/// transformations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalGrid {
    height: usize,
    width: usize,
    size: usize,
    probs: Vec<f64>,
}

/// Shared probabilistic index map `p_ij(s)`.
pub type IndexPrior = CategoricalGrid;
/// Per-signal variational posterior `q(s_ij)`.
pub type Responsibilities = CategoricalGrid;
/// Soft stack of entry-indicator layers (layer `k` holds the mass for entry `k`).
pub type EntryStatImage = CategoricalGrid;

impl CategoricalGrid {
    /// Builds from row-major probabilities (`loc * size + s`). Rows are
    /// checked for non-negativity but not renormalized.
    pub fn new(height: usize, width: usize, size: usize, probs: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || size == 0 {
            return Err(PimError::InvalidInput(format!(
                "categorical grid dimensions must be positive, got {height}x{width}x{size}"
            )));
        }
        if probs.len() != height * width * size {
            return Err(PimError::InvalidInput(format!(
                "expected {} probabilities, got {}",
                height * width * size,
                probs.len()
            )));
        }
        if let Some(pos) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(PimError::InvalidInput(format!(
                "invalid probability {} at flat index {pos}",
                probs[pos]
            )));
        }
        Ok(Self {
            height,
            width,
            size,
            probs,
        })
    }

    pub fn uniform(height: usize, width: usize, size: usize) -> Self {
        Self {
            height,
            width,
            size,
            probs: vec![1.0 / size as f64; height * width * size],
        }
    }

    /// One-hot rows from a label map (`labels[loc] < size`).
    pub fn one_hot(height: usize, width: usize, size: usize, labels: &[usize]) -> Self {
        assert_eq!(labels.len(), height * width);
        let mut probs = vec![0.0; height * width * size];
        for (loc, &s) in labels.iter().enumerate() {
            probs[loc * size + s] = 1.0;
        }
        Self {
            height,
            width,
            size,
            probs,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of categories (palette size `S`).
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    #[inline]
    pub fn at(&self, loc: usize) -> &[f64] {
        &self.probs[loc * self.size..(loc + 1) * self.size]
    }

    #[inline]
    pub fn at_mut(&mut self, loc: usize) -> &mut [f64] {
        &mut self.probs[loc * self.size..(loc + 1) * self.size]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, s: usize) -> f64 {
        self.probs[(i * self.width + j) * self.size + s]
    }

    /// Per-location argmax, ties to the lowest index.
    pub fn argmax_map(&self) -> Vec<usize> {
        (0..self.locations())
            .map(|loc| argmax(self.at(loc)))
            .collect()
    }

    /// Total mass per layer.
    pub fn layer_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.size];
        for loc in 0..self.locations() {
            for (m, &p) in mass.iter_mut().zip(self.at(loc)) {
                *m += p;
            }
        }
        mass
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_error(&self) -> f64 {
        (0..self.locations())
            .map(|loc| (self.at(loc).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Copy with categories relabelled: new category `perm[s]` receives old `s`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.size);
        let mut out = self.clone();
        for loc in 0..self.locations() {
            let src = self.at(loc);
            let dst = out.at_mut(loc);
            for (s, &p) in src.iter().enumerate() {
                dst[perm[s]] = p;
            }
        }
        out
    }

    pub(crate) fn ensure_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height {
            return Err(mismatch(
                "index distribution",
                "height",
                self.height,
                height,
            ));
        }
        if self.width != width {
            return Err(mismatch("index distribution", "width", self.width, width));
        }
        Ok(())
    }

    pub(crate) fn ensure_size(&self, size: usize) -> Result<()> {
        if self.size != size {
            return Err(mismatch(
                "index distribution",
                "palette size S",
                self.size,
                size,
            ));
        }
        Ok(())
    }
}

/// Index of the largest value, ties to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}
