//! Gaussian palettes and the per-entry observation model.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::config::EmConfig;
use crate::error::{mismatch, PimError, Result};
use crate::grid::{CategoricalGrid, SignalGrid};

/// One palette entry: a diagonal Gaussian over `D`-dimensional measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl PaletteEntry {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != variance.len() {
            return Err(PimError::InvalidInput(format!(
                "palette entry needs equal, non-zero mean/variance lengths ({} vs {})",
                mean.len(),
                variance.len()
            )));
        }
        if variance.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(PimError::InvalidInput(
                "palette entry variances must be finite and positive".into(),
            ));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(PimError::InvalidInput(
                "palette entry mean must be finite".into(),
            ));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `-0.5 * sum_d ln(2 pi var_d)`.
    fn log_norm(&self) -> f64 {
        self.variance
            .iter()
            .map(|v| -0.5 * (2.0 * PI * v).ln())
            .sum()
    }
}

/// Diagonal Gaussian log-density of `x` under `entry`.
pub fn log_entry_likelihood(x: &[f64], entry: &PaletteEntry) -> f64 {
    debug_assert_eq!(x.len(), entry.dim());
    x.iter()
        .zip(&entry.mean)
        .zip(&entry.variance)
        .map(|((x, m), v)| -0.5 * (2.0 * PI * v).ln() - 0.5 * (x - m) * (x - m) / v)
        .sum()
}

/// An ordered table of `S` palette entries local to one signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub entries: Vec<PaletteEntry>,
}

impl Palette {
    pub fn new(entries: Vec<PaletteEntry>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(PimError::InvalidInput(
                "palette needs at least one entry".into(),
            ));
        };
        let dim = first.dim();
        if let Some(bad) = entries.iter().find(|e| e.dim() != dim) {
            return Err(mismatch("palette entries", "dim", dim, bad.dim()));
        }
        Ok(Self { entries })
    }

    /// Number of entries `S`.
    pub fn size(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].dim()
    }

    /// Copy with entries relabelled: new entry `perm[s]` is old entry `s`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut entries = self.entries.clone();
        for (s, e) in self.entries.iter().enumerate() {
            entries[perm[s]] = e.clone();
        }
        Self { entries }
    }

    pub(crate) fn ensure_matches(&self, grid: &SignalGrid, size: usize) -> Result<()> {
        if self.size() != size {
            return Err(mismatch("palette", "palette size S", self.size(), size));
        }
        if self.dim() != grid.dim() {
            return Err(mismatch("palette vs grid", "dim", self.dim(), grid.dim()));
        }
        Ok(())
    }
}

/// Log-likelihood of every location under every entry, laid out `loc * S + s`.
pub fn log_likelihood_table(grid: &SignalGrid, palette: &Palette) -> Vec<f64> {
    let size = palette.size();
    let norms: Vec<f64> = palette.entries.iter().map(PaletteEntry::log_norm).collect();
    let mut out = Vec::with_capacity(grid.locations() * size);
    for loc in 0..grid.locations() {
        let x = grid.at(loc);
        for (entry, norm) in palette.entries.iter().zip(&norms) {
            let quad: f64 = x
                .iter()
                .zip(&entry.mean)
                .zip(&entry.variance)
                .map(|((x, m), v)| (x - m) * (x - m) / v)
                .sum();
            out.push(norm - 0.5 * quad);
        }
    }
    out
}

/// Result of a palette M step.
#[derive(Debug, Clone)]
pub(crate) struct PaletteUpdate {
    pub palette: Palette,
    /// Same update with every re-seeded entry left at its previous value;
    /// present only when something was re-seeded and a previous palette was given.
    pub fallback: Option<Palette>,
}

/// Responsibility-weighted moments per entry (the closed-form palette M step),
/// with variance flooring and starvation rescue.
///
/// `weight(loc, s)` supplies the weights; `previous` is used for the
/// non-reseeding fallback.
pub(crate) fn weighted_palette(
    grid: &SignalGrid,
    size: usize,
    weight: impl Fn(usize, usize) -> f64,
    previous: Option<&Palette>,
    cfg: &EmConfig,
) -> PaletteUpdate {
    let dim = grid.dim();
    let locations = grid.locations();
    let mut mass = vec![0.0; size];
    let mut sums = vec![0.0; size * dim];
    for loc in 0..locations {
        let x = grid.at(loc);
        for s in 0..size {
            let w = weight(loc, s);
            if w == 0.0 {
                continue;
            }
            mass[s] += w;
            for d in 0..dim {
                sums[s * dim + d] += w * x[d];
            }
        }
    }
    let means: Vec<Vec<f64>> = (0..size)
        .map(|s| {
            (0..dim)
                .map(|d| {
                    if mass[s] > 0.0 {
                        sums[s * dim + d] / mass[s]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut scatter = vec![0.0; size * dim];
    for loc in 0..locations {
        let x = grid.at(loc);
        for s in 0..size {
            let w = weight(loc, s);
            if w == 0.0 {
                continue;
            }
            for d in 0..dim {
                let r = x[d] - means[s][d];
                scatter[s * dim + d] += w * r * r;
            }
        }
    }

    let threshold = cfg.mass_epsilon * locations as f64;
    let starved: Vec<bool> = mass
        .iter()
        .map(|&m| !(m >= threshold) || m == 0.0)
        .collect();
    let mut entries: Vec<Option<PaletteEntry>> = (0..size)
        .map(|s| {
            if starved[s] {
                return None;
            }
            let variance = (0..dim)
                .map(|d| (scatter[s * dim + d] / mass[s]).max(cfg.variance_floor))
                .collect();
            Some(PaletteEntry {
                mean: means[s].clone(),
                variance,
            })
        })
        .collect();

    let starved_ids: Vec<usize> = (0..size).filter(|&s| starved[s]).collect();
    if starved_ids.is_empty() {
        return PaletteUpdate {
            palette: Palette {
                entries: entries.into_iter().map(Option::unwrap).collect(),
            },
            fallback: None,
        };
    }

    // Re-seed at the worst-explained measurements under the entries that kept mass.
    let fitted: Vec<&PaletteEntry> = entries.iter().flatten().collect();
    let mut fit: Vec<(f64, usize)> = (0..locations)
        .map(|loc| {
            let best = fitted
                .iter()
                .map(|e| log_entry_likelihood(grid.at(loc), e))
                .fold(f64::NEG_INFINITY, f64::max);
            (best, loc)
        })
        .collect();
    fit.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let global_var: Vec<f64> = grid
        .variance()
        .into_iter()
        .map(|v| v.max(cfg.variance_floor))
        .collect();
    let mut fallback = previous.map(|_| entries.clone());
    for (rank, &s) in starved_ids.iter().enumerate() {
        let loc = fit[rank % locations].1;
        entries[s] = Some(PaletteEntry {
            mean: grid.at(loc).to_vec(),
            variance: global_var.clone(),
        });
        if let (Some(fb), Some(prev)) = (fallback.as_mut(), previous) {
            fb[s] = Some(prev.entries[s].clone());
        }
    }
    PaletteUpdate {
        palette: Palette {
            entries: entries.into_iter().map(Option::unwrap).collect(),
        },
        fallback: fallback.map(|fb| Palette {
            entries: fb.into_iter().map(Option::unwrap).collect(),
        }),
    }
}

/// Palette M step from responsibilities: weighted means and diagonal weighted
/// scatter per entry, variances floored, starved entries re-seeded.
pub fn m_step_palette(
    grid: &SignalGrid,
    resps: &CategoricalGrid,
    size: usize,
    cfg: &EmConfig,
) -> Result<Palette> {
    resps.ensure_dims(grid.height(), grid.width())?;
    resps.ensure_size(size)?;
    Ok(weighted_palette(grid, size, |loc, s| resps.at(loc)[s], None, cfg).palette)
}
