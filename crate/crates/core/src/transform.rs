//! Cyclic 2-D shifts and transformation scoring.
//!
//! A transform `T = (dy, dx)` maps an observed location `(i, j)` to the
//! index-map location `((i + dy) mod I, (j + dx) mod J)`. The log-likelihood of
//! a signal under a (soft) index map and a transform is rearranged per palette
//! entry: one log-density image per entry is correlated with the shifted entry
//! layer, so the cost is linear in the palette size.

use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};
use crate::grid::{EntryStatImage, SignalGrid};
use crate::palette::{log_likelihood_table, Palette};

/// A cyclic shift, stored as non-negative representatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transform {
    pub dy: usize,
    pub dx: usize,
}

impl Transform {
    pub const IDENTITY: Transform = Transform { dy: 0, dx: 0 };

    /// Normalizes signed shifts modulo the grid size.
    pub fn new(dy: i64, dx: i64, height: usize, width: usize) -> Self {
        Self {
            dy: dy.rem_euclid(height as i64) as usize,
            dx: dx.rem_euclid(width as i64) as usize,
        }
    }

    pub fn inverse(self, height: usize, width: usize) -> Self {
        Self {
            dy: (height - self.dy) % height,
            dx: (width - self.dx) % width,
        }
    }

    /// Apply `self`, then `other`.
    pub fn then(self, other: Transform, height: usize, width: usize) -> Self {
        Self {
            dy: (self.dy + other.dy) % height,
            dx: (self.dx + other.dx) % width,
        }
    }

    /// Signed representative closest to zero, for reporting.
    pub fn signed(self, height: usize, width: usize) -> (i64, i64) {
        let wrap = |v: usize, n: usize| {
            let v = v as i64;
            let n = n as i64;
            if v > n / 2 {
                v - n
            } else {
                v
            }
        };
        (wrap(self.dy, height), wrap(self.dx, width))
    }

    /// Flat index-map location that observed location `loc` reads from.
    #[inline]
    pub fn source(self, loc: usize, height: usize, width: usize) -> usize {
        let i = loc / width;
        let j = loc % width;
        ((i + self.dy) % height) * width + (j + self.dx) % width
    }
}

/// The discrete transformation family with its prior `p(T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    height: usize,
    width: usize,
    transforms: Vec<Transform>,
    prior: Vec<f64>,
}

impl TransformSet {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            transforms: vec![Transform::IDENTITY],
            prior: vec![1.0],
        }
    }

    /// All shifts with `dy in [-dy_max, dy_max]`, `dx in [-dx_max, dx_max]`,
    /// deduplicated after wrapping, with a uniform prior.
    pub fn centered_shifts(dy_max: usize, dx_max: usize, height: usize, width: usize) -> Self {
        let mut transforms = Vec::new();
        for dy in -(dy_max as i64)..=dy_max as i64 {
            for dx in -(dx_max as i64)..=dx_max as i64 {
                let t = Transform::new(dy, dx, height, width);
                if !transforms.contains(&t) {
                    transforms.push(t);
                }
            }
        }
        let n = transforms.len();
        Self {
            height,
            width,
            transforms,
            prior: vec![1.0 / n as f64; n],
        }
    }

    /// Explicit transforms and prior. The identity must be present and the
    /// prior must sum to one.
    pub fn with_prior(
        height: usize,
        width: usize,
        transforms: Vec<Transform>,
        prior: Vec<f64>,
    ) -> Result<Self> {
        if transforms.len() != prior.len() || transforms.is_empty() {
            return Err(PimError::Config(format!(
                "{} transforms with {} prior weights",
                transforms.len(),
                prior.len()
            )));
        }
        if !transforms.contains(&Transform::IDENTITY) {
            return Err(PimError::Config(
                "transform set must contain the identity".into(),
            ));
        }
        if transforms.iter().any(|t| t.dy >= height || t.dx >= width) {
            return Err(PimError::Config(
                "transform shifts must be normalized".into(),
            ));
        }
        if prior.iter().any(|p| !(*p >= 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(PimError::Config(
                "transform prior must be a distribution".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            transforms,
            prior,
        })
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn position(&self, t: Transform) -> Option<usize> {
        self.transforms.iter().position(|&u| u == t)
    }

    pub(crate) fn ensure_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(PimError::Config(format!(
                "transform set built for {}x{} used on {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Brings an index-map statistic into the observed frame: output location
/// `(i, j)` takes every layer from the shifted source location.
pub fn apply_transform(stat: &EntryStatImage, t: Transform) -> EntryStatImage {
    let (h, w) = (stat.height(), stat.width());
    let mut out = stat.clone();
    for loc in 0..stat.locations() {
        out.at_mut(loc)
            .copy_from_slice(stat.at(t.source(loc, h, w)));
    }
    out
}

/// Expected log-likelihood of the signal under every transform:
/// `score[T] = sum_ij sum_k stat[T(ij), k] * ln N(x_ij; mu_k, Phi_k)`.
pub fn transform_scores(
    grid: &SignalGrid,
    palette: &Palette,
    stat: &EntryStatImage,
    tset: &TransformSet,
) -> Result<Vec<f64>> {
    stat.ensure_dims(grid.height(), grid.width())?;
    palette.ensure_matches(grid, stat.size())?;
    tset.ensure_dims(grid.height(), grid.width())?;
    let table = log_likelihood_table(grid, palette);
    Ok(scores_from_table(&table, stat, tset))
}

/// [`transform_scores`] from a precomputed log-likelihood table (`loc * S + k`).
pub(crate) fn scores_from_table(
    table: &[f64],
    stat: &EntryStatImage,
    tset: &TransformSet,
) -> Vec<f64> {
    let (h, w, size) = (stat.height(), stat.width(), stat.size());
    tset.transforms()
        .iter()
        .map(|&t| {
            let mut total = 0.0;
            for loc in 0..h * w {
                let src = stat.at(t.source(loc, h, w));
                let ll = &table[loc * size..(loc + 1) * size];
                total += src.iter().zip(ll).map(|(q, l)| q * l).sum::<f64>();
            }
            total
        })
        .collect()
}

/// Log-likelihood table moved into the index-map frame and averaged over
/// transforms: `out[uv, k] = sum_T weights[T] * table[T^-1(uv), k]`.
pub(crate) fn back_project(
    table: &[f64],
    weights: &[f64],
    tset: &TransformSet,
    size: usize,
) -> Vec<f64> {
    let (h, w) = (tset.height(), tset.width());
    let mut out = vec![0.0; h * w * size];
    for (&t, &wt) in tset.transforms().iter().zip(weights) {
        if wt == 0.0 {
            continue;
        }
        for loc in 0..h * w {
            let dst = t.source(loc, h, w);
            let src = &table[loc * size..(loc + 1) * size];
            for (o, l) in out[dst * size..(dst + 1) * size].iter_mut().zip(src) {
                *o += wt * l;
            }
        }
    }
    out
}

/// Index-map statistic moved into the observed frame and averaged over
/// transforms: `out[ij, k] += weights[T] * stat[T(ij), k]`, accumulated into `out`.
pub(crate) fn forward_project_into(
    stat: &EntryStatImage,
    weights: &[f64],
    tset: &TransformSet,
    scale: f64,
    out: &mut [f64],
) {
    let (h, w, size) = (stat.height(), stat.width(), stat.size());
    for (&t, &wt) in tset.transforms().iter().zip(weights) {
        let wt = wt * scale;
        if wt == 0.0 {
            continue;
        }
        for loc in 0..h * w {
            let src = stat.at(t.source(loc, h, w));
            for (o, q) in out[loc * size..(loc + 1) * size].iter_mut().zip(src) {
                *o += wt * q;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CategoricalGrid;

    #[test]
    fn normalization_and_inverse() {
        let t = Transform::new(-1, 7, 4, 5);
        assert_eq!(t, Transform { dy: 3, dx: 2 });
        assert_eq!(t.then(t.inverse(4, 5), 4, 5), Transform::IDENTITY);
        assert_eq!(t.signed(4, 5), (-1, 2));
    }

    #[test]
    fn identity_leaves_stat_unchanged() {
        let s =
            CategoricalGrid::new(2, 2, 2, vec![0.1, 0.9, 0.3, 0.7, 0.5, 0.5, 1.0, 0.0]).unwrap();
        assert_eq!(apply_transform(&s, Transform::IDENTITY), s);
    }

    #[test]
    fn row_shift_swaps_two_rows() {
        let s = CategoricalGrid::new(2, 1, 2, vec![1.0, 0.0, 0.25, 0.75]).unwrap();
        let out = apply_transform(&s, Transform::new(1, 0, 2, 1));
        assert_eq!(out.at(0), s.at(1));
        assert_eq!(out.at(1), s.at(0));
    }

    #[test]
    fn shift_then_complement_is_identity() {
        let (h, w) = (3, 4);
        let probs: Vec<f64> = (0..h * w * 2).map(|n| (n % 5) as f64).collect();
        let s = CategoricalGrid::new(h, w, 2, probs).unwrap();
        let t = Transform::new(2, 1, h, w);
        let back = Transform::new((h - 2) as i64, (w - 1) as i64, h, w);
        assert_eq!(apply_transform(&apply_transform(&s, t), back), s);
    }

    #[test]
    fn centered_shift_set_wraps_and_dedups() {
        let set = TransformSet::centered_shifts(1, 1, 3, 3);
        assert_eq!(set.len(), 9);
        let tiny = TransformSet::centered_shifts(2, 0, 2, 2);
        assert_eq!(tiny.len(), 2);
        assert!(tiny.position(Transform::IDENTITY).is_some());
        assert!((set.prior().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn explicit_set_requires_identity() {
        let err = TransformSet::with_prior(3, 3, vec![Transform { dy: 1, dx: 0 }], vec![1.0]);
        assert!(err.is_err());
        assert!(TransformSet::with_prior(3, 3, vec![Transform::IDENTITY], vec![0.5]).is_err());
    }
}
