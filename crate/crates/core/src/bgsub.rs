//! Palette-invariant background subtraction.
//!
//! A PIM trained on background frames fixes the index prior. For a test frame
//! only the palette is re-inferred, so global illumination or sensor changes
//! are absorbed by the palette, and the per-pixel free energy scores how badly
//! each pixel fits the background structure.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::EmConfig;
use crate::error::{PimError, Result};
use crate::grid::{IndexPrior, Responsibilities, SignalGrid};
use crate::palette::{weighted_palette, Palette, PaletteEntry};
use crate::pim::{e_step, infer_palette, location_free_energy};

/// Default palette size for background models.
pub const DEFAULT_BACKGROUND_SIZE: usize = 8;
/// Default MAD multiplier of the adaptive threshold.
pub const DEFAULT_MAD_K: f64 = 10.0;

/// How the energy map is turned into a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdPolicy {
    /// `median(F) + k * MAD(F)` per frame.
    Mad { k: f64 },
    /// A fixed energy threshold.
    Fixed(f64),
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Mad { k: DEFAULT_MAD_K }
    }
}

impl ThresholdPolicy {
    /// Threshold for one energy map.
    pub fn threshold(&self, energy: &[f64]) -> f64 {
        match *self {
            ThresholdPolicy::Fixed(v) => v,
            ThresholdPolicy::Mad { k } => {
                let med = median(energy.to_vec());
                let mad = median(energy.iter().map(|f| (f - med).abs()).collect());
                med + k * mad
            }
        }
    }
}

impl FromStr for ThresholdPolicy {
    type Err = PimError;

    /// Accepts `mad`, `mad:<k>` and `fixed:<v>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            PimError::Config(format!(
                "threshold policy `{s}`: expected mad, mad:<k> or fixed:<v>"
            ))
        };
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(bad)
        };
        match s.split_once(':') {
            None if s == "mad" => Ok(ThresholdPolicy::default()),
            Some(("mad", k)) => {
                let k = parse(k)?;
                if k < 0.0 {
                    return Err(bad());
                }
                Ok(ThresholdPolicy::Mad { k })
            }
            Some(("fixed", v)) => Ok(ThresholdPolicy::Fixed(parse(v)?)),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdPolicy::Mad { k } => write!(f, "mad:{k}"),
            ThresholdPolicy::Fixed(v) => write!(f, "fixed:{v}"),
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Configuration used for test-time palette inference when none is given.
pub fn default_test_config() -> EmConfig {
    EmConfig {
        max_iters: 50,
        tol: 1e-6,
        ..EmConfig::default()
    }
}

/// Re-infers the palette of a test frame against the frozen background prior.
pub fn infer_test_palette(
    grid: &SignalGrid,
    prior: &IndexPrior,
    cfg: &EmConfig,
) -> Result<(Palette, Responsibilities)> {
    let fit = infer_palette(grid, prior, cfg)?;
    Ok((fit.palette, fit.resps))
}

/// Per-pixel free energy `F_ij`.
pub fn pixelwise_free_energy(
    grid: &SignalGrid,
    palette: &Palette,
    prior: &IndexPrior,
    resps: &Responsibilities,
) -> Result<Vec<f64>> {
    location_free_energy(grid, palette, prior, resps)
}

/// Responsibility-weighted palette means per pixel.
pub fn expected_background(resps: &Responsibilities, palette: &Palette) -> Result<SignalGrid> {
    resps.ensure_size(palette.size())?;
    let dim = palette.dim();
    let mut values = Vec::with_capacity(resps.locations() * dim);
    for loc in 0..resps.locations() {
        let q = resps.at(loc);
        for d in 0..dim {
            values.push(
                q.iter()
                    .zip(&palette.entries)
                    .map(|(w, e)| w * e.mean[d])
                    .sum(),
            );
        }
    }
    SignalGrid::new(resps.height(), resps.width(), dim, values)
}

/// Weight kept by outlying measurements during trimmed re-estimation.
const TRIM_WEIGHT: f64 = 1e-3;
/// Upper bound on trimmed re-estimation rounds in [`detect`].
const TRIM_ROUNDS: usize = 10;
/// Upper-tail probability of the chi-square cutoff marking outliers.
const TRIM_Z: f64 = 3.090_232_306_167_813; // standard normal 0.999 quantile

/// Chi-square quantile with `dof` degrees of freedom (Wilson-Hilferty).
fn chi_square_cutoff(dof: usize) -> f64 {
    let k = dof as f64;
    let a = 2.0 / (9.0 * k);
    k * (1.0 - a + TRIM_Z * a.sqrt()).powi(3)
}

fn weighted_median(pairs: &mut [(f64, f64)]) -> f64 {
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let mut acc = 0.0;
    for &(x, w) in pairs.iter() {
        acc += w;
        if acc >= 0.5 * total {
            return x;
        }
    }
    pairs.last().map_or(0.0, |p| p.0)
}

/// Per-entry weighted median and scaled MAD. Entries without enough mass
/// keep their value from `fallback`.
fn robust_palette(
    grid: &SignalGrid,
    resps: &Responsibilities,
    fallback: &Palette,
    cfg: &EmConfig,
) -> Palette {
    let dim = grid.dim();
    let min_mass = cfg.mass_epsilon * grid.locations() as f64;
    let entries = (0..resps.size())
        .map(|s| {
            let mass: f64 = (0..grid.locations()).map(|loc| resps.at(loc)[s]).sum();
            if !(mass > min_mass) {
                return fallback.entries[s].clone();
            }
            let mut mean = Vec::with_capacity(dim);
            let mut variance = Vec::with_capacity(dim);
            for d in 0..dim {
                let mut pairs: Vec<(f64, f64)> = (0..grid.locations())
                    .map(|loc| (grid.at(loc)[d], resps.at(loc)[s]))
                    .filter(|p| p.1 > 0.0)
                    .collect();
                let m = weighted_median(&mut pairs);
                pairs.iter_mut().for_each(|p| p.0 = (p.0 - m).abs());
                let scale = 1.4826 * weighted_median(&mut pairs);
                mean.push(m);
                variance.push((scale * scale).max(cfg.variance_floor));
            }
            PaletteEntry { mean, variance }
        })
        .collect();
    Palette { entries }
}

/// `true` where the measurement is an outlier for the entry.
fn outliers(grid: &SignalGrid, palette: &Palette) -> Vec<bool> {
    let cutoff = chi_square_cutoff(grid.dim());
    (0..grid.locations())
        .flat_map(|loc| {
            let x = grid.at(loc);
            palette.entries.iter().map(move |e| {
                let z2: f64 = x
                    .iter()
                    .zip(&e.mean)
                    .zip(&e.variance)
                    .map(|((x, m), v)| (x - m) * (x - m) / v)
                    .sum();
                z2 > cutoff
            })
        })
        .collect()
}

/// Detection output for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ForegroundResult {
    pub energy_map: Vec<f64>,
    pub threshold: f64,
    pub mask: Vec<bool>,
    pub expected_background: SignalGrid,
    pub inferred_palette: Palette,
}

/// Full single-frame pipeline against a trained background prior.
///
/// Foreground pixels drag a least-squares palette towards themselves, so after
/// the plain palette inference the palette is re-estimated robustly: a
/// median/MAD start, then weighted moments in which measurements beyond the
/// 0.999 chi-square cutoff of an entry are down-weighted, until the outlier
/// pattern settles.
pub fn detect(
    grid: &SignalGrid,
    prior: Option<&IndexPrior>,
    policy: ThresholdPolicy,
    cfg: &EmConfig,
) -> Result<ForegroundResult> {
    let prior = prior
        .ok_or_else(|| PimError::InvalidState("background model has not been trained".into()))?;
    let (plain, resps) = infer_test_palette(grid, prior, cfg)?;
    let size = prior.size();
    let mut palette = robust_palette(grid, &resps, &plain, cfg);
    let mut resps = e_step(grid, &palette, prior)?;
    let mut flagged: Vec<bool> = Vec::new();
    for _ in 0..TRIM_ROUNDS {
        let next = outliers(grid, &palette);
        if next == flagged {
            break;
        }
        flagged = next;
        let w = |loc: usize, s: usize| {
            resps.at(loc)[s]
                * if flagged[loc * size + s] {
                    TRIM_WEIGHT
                } else {
                    1.0
                }
        };
        palette = weighted_palette(grid, size, w, None, cfg).palette;
        resps = e_step(grid, &palette, prior)?;
    }
    let energy_map = pixelwise_free_energy(grid, &palette, prior, &resps)?;
    let threshold = policy.threshold(&energy_map);
    let mask = energy_map.iter().map(|&f| f > threshold).collect();
    Ok(ForegroundResult {
        expected_background: expected_background(&resps, &palette)?,
        energy_map,
        threshold,
        mask,
        inferred_palette: palette,
    })
}
