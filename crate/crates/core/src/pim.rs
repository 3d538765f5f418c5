//! The basic probabilistic index map: a location-wise categorical prior over
//! palette indices shared by a collection of signals, each signal carrying its
//! own Gaussian palette. Learned by exact E steps and closed-form M steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{best_assignment, kmeans};
use crate::config::EmConfig;
use crate::error::{PimError, Result};
use crate::grid::{argmax, CategoricalGrid, IndexPrior, Responsibilities, SignalGrid};
use crate::math::{log_sum_exp, project_floored, softmax_in_place, xlogx};
use crate::palette::{log_likelihood_table, weighted_palette, Palette, PaletteEntry};

/// A trained PIM: the shared prior plus one palette per training signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PimModel {
    pub prior: IndexPrior,
    pub palette_size: usize,
    pub palettes: Vec<Palette>,
    pub final_free_energy: f64,
    /// Free energy after the E step of every iteration.
    pub trace: Vec<f64>,
}

/// Starting point for [`fit_pim_from`].
#[derive(Debug, Clone, PartialEq)]
pub struct PimInit {
    pub prior: IndexPrior,
    pub palettes: Vec<Palette>,
}

impl PimInit {
    /// Relabels every palette and the prior with the same permutation.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            prior: self.prior.permuted(perm),
            palettes: self.palettes.iter().map(|p| p.permuted(perm)).collect(),
        }
    }
}

fn check_inputs(grid: &SignalGrid, palette: &Palette, prior: &IndexPrior) -> Result<()> {
    prior.ensure_dims(grid.height(), grid.width())?;
    palette.ensure_matches(grid, prior.size())
}

/// Posterior over indices at every location:
/// `q(s_ij = s) ∝ p_ij(s) N(x_ij; mu_s, Phi_s)`, normalized in the log domain.
pub fn e_step(
    grid: &SignalGrid,
    palette: &Palette,
    prior: &IndexPrior,
) -> Result<Responsibilities> {
    check_inputs(grid, palette, prior)?;
    let size = palette.size();
    let mut probs = log_likelihood_table(grid, palette);
    for (loc, row) in probs.chunks_mut(size).enumerate() {
        for (w, &p) in row.iter_mut().zip(prior.at(loc)) {
            *w += p.ln();
        }
        softmax_in_place(row);
    }
    CategoricalGrid::new(grid.height(), grid.width(), size, probs)
}

/// Index-prior M step: per-location average of the responsibilities, then
/// projected onto `p >= prior_floor`.
pub fn m_step_prior(resps: &[Responsibilities], prior_floor: f64) -> Result<IndexPrior> {
    let first = resps
        .first()
        .ok_or_else(|| PimError::InvalidInput("m_step_prior needs at least one signal".into()))?;
    for r in &resps[1..] {
        r.ensure_dims(first.height(), first.width())?;
        r.ensure_size(first.size())?;
    }
    let size = first.size();
    let mut probs = vec![0.0; first.locations() * size];
    for r in resps {
        for (acc, &q) in probs.iter_mut().zip(r.probs()) {
            *acc += q;
        }
    }
    let t = resps.len() as f64;
    for row in probs.chunks_mut(size) {
        row.iter_mut().for_each(|p| *p /= t);
        project_floored(row, prior_floor);
    }
    CategoricalGrid::new(first.height(), first.width(), size, probs)
}

/// Per-location free-energy terms
/// `F_ij = sum_s q (ln q - ln p_ij(s) - ln N(x_ij; s))`.
pub fn location_free_energy(
    grid: &SignalGrid,
    palette: &Palette,
    prior: &IndexPrior,
    resps: &Responsibilities,
) -> Result<Vec<f64>> {
    check_inputs(grid, palette, prior)?;
    resps.ensure_dims(grid.height(), grid.width())?;
    resps.ensure_size(prior.size())?;
    let size = prior.size();
    let table = log_likelihood_table(grid, palette);
    Ok((0..grid.locations())
        .map(|loc| {
            let q = resps.at(loc);
            let p = prior.at(loc);
            let ll = &table[loc * size..(loc + 1) * size];
            (0..size)
                .map(|s| {
                    if q[s] > 0.0 {
                        xlogx(q[s]) - q[s] * p[s].ln() - q[s] * ll[s]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect())
}

/// Free energy of one signal.
pub fn signal_free_energy(
    grid: &SignalGrid,
    palette: &Palette,
    prior: &IndexPrior,
    resps: &Responsibilities,
) -> Result<f64> {
    Ok(location_free_energy(grid, palette, prior, resps)?
        .iter()
        .sum())
}

/// Free energy of a collection: entropy, prior and likelihood sums over all
/// signals, locations and indices.
pub fn free_energy(
    grids: &[SignalGrid],
    palettes: &[Palette],
    prior: &IndexPrior,
    resps: &[Responsibilities],
) -> Result<f64> {
    if grids.len() != palettes.len() || grids.len() != resps.len() {
        return Err(PimError::Config(format!(
            "free_energy: {} grids, {} palettes, {} responsibilities",
            grids.len(),
            palettes.len(),
            resps.len()
        )));
    }
    grids
        .iter()
        .zip(palettes)
        .zip(resps)
        .map(|((g, pal), q)| signal_free_energy(g, pal, prior, q))
        .sum()
}

/// `-sum_ij ln sum_s p_ij(s) N(x_ij; s)` for one signal.
pub fn exact_negative_log_likelihood(
    grid: &SignalGrid,
    palette: &Palette,
    prior: &IndexPrior,
) -> Result<f64> {
    check_inputs(grid, palette, prior)?;
    let size = palette.size();
    let mut table = log_likelihood_table(grid, palette);
    let mut total = 0.0;
    for (loc, row) in table.chunks_mut(size).enumerate() {
        for (w, &p) in row.iter_mut().zip(prior.at(loc)) {
            *w += p.ln();
        }
        total -= log_sum_exp(row);
    }
    Ok(total)
}

/// One-hot limit of a prior: every location collapses onto its most probable
/// index (ties to the lowest), then the floor is re-applied.
pub fn harden_prior(prior: &IndexPrior, prior_floor: f64) -> IndexPrior {
    let mut out = prior.clone();
    for loc in 0..prior.locations() {
        let best = argmax(prior.at(loc));
        let row = out.at_mut(loc);
        row.iter_mut()
            .enumerate()
            .for_each(|(s, p)| *p = if s == best { 1.0 } else { 0.0 });
        project_floored(row, prior_floor);
    }
    out
}

pub(crate) fn validate_collection(grids: &[SignalGrid], size: usize) -> Result<()> {
    let first = grids
        .first()
        .ok_or_else(|| PimError::InvalidInput("need at least one signal".into()))?;
    if size == 0 {
        return Err(PimError::InvalidInput(
            "palette size must be at least 1".into(),
        ));
    }
    for g in &grids[1..] {
        g.ensure_same_shape(first)
            .map_err(|e| PimError::InvalidInput(e.to_string()))?;
    }
    Ok(())
}

/// k-means palette for one signal, returned with its label map.
pub(crate) fn kmeans_palette(
    grid: &SignalGrid,
    size: usize,
    cfg: &EmConfig,
    rng: &mut ChaCha8Rng,
) -> (Palette, Vec<usize>) {
    let km = kmeans(grid, size, cfg.kmeans_iters, rng);
    let global_var: Vec<f64> = grid
        .variance()
        .into_iter()
        .map(|v| v.max(cfg.variance_floor))
        .collect();
    let dim = grid.dim();
    let mut counts = vec![0usize; size];
    let mut scatter = vec![vec![0.0; dim]; size];
    for (loc, &c) in km.labels.iter().enumerate() {
        counts[c] += 1;
        for (d, &x) in grid.at(loc).iter().enumerate() {
            let r = x - km.centers[c][d];
            scatter[c][d] += r * r;
        }
    }
    let entries = (0..size)
        .map(|c| {
            let variance = if counts[c] > 1 {
                scatter[c]
                    .iter()
                    .map(|s| (s / counts[c] as f64).max(cfg.variance_floor))
                    .collect()
            } else {
                global_var.clone()
            };
            PaletteEntry {
                mean: km.centers[c].clone(),
                variance,
            }
        })
        .collect();
    (Palette { entries }, km.labels)
}

/// Relabels each signal's k-means labels to agree with the running consensus
/// of the signals before it. Returns per-signal permutations (`perm[old] = new`).
pub(crate) fn align_label_maps(label_maps: &[Vec<usize>], size: usize) -> Vec<Vec<usize>> {
    let locations = label_maps.first().map_or(0, Vec::len);
    let mut counts = vec![0.0; locations * size];
    let mut perms = Vec::with_capacity(label_maps.len());
    for labels in label_maps {
        let perm = if perms.is_empty() {
            (0..size).collect()
        } else {
            let mut score = vec![vec![0.0; size]; size];
            for (loc, &a) in labels.iter().enumerate() {
                for b in 0..size {
                    score[a][b] += counts[loc * size + b];
                }
            }
            best_assignment(&score)
        };
        for (loc, &a) in labels.iter().enumerate() {
            counts[loc * size + perm[a]] += 1.0;
        }
        perms.push(perm);
    }
    perms
}

/// Default initialization: per-signal k-means palettes with labels aligned
/// across signals, and a uniform prior with seeded jitter.
pub fn initialize_pim(grids: &[SignalGrid], size: usize, cfg: &EmConfig) -> Result<PimInit> {
    validate_collection(grids, size)?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (palettes, labels): (Vec<Palette>, Vec<Vec<usize>>) = grids
        .iter()
        .map(|g| kmeans_palette(g, size, cfg, &mut rng))
        .unzip();
    let perms = align_label_maps(&labels, size);
    let palettes = palettes
        .iter()
        .zip(&perms)
        .map(|(p, perm)| p.permuted(perm))
        .collect();
    let prior = jittered_uniform(
        grids[0].height(),
        grids[0].width(),
        size,
        cfg.prior_jitter,
        &mut rng,
    );
    Ok(PimInit { prior, palettes })
}

pub(crate) fn jittered_uniform(
    height: usize,
    width: usize,
    size: usize,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> IndexPrior {
    let mut probs: Vec<f64> = (0..height * width * size)
        .map(|_| 1.0 / size as f64 + jitter * rng.random::<f64>())
        .collect();
    for row in probs.chunks_mut(size) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
    }
    CategoricalGrid::new(height, width, size, probs).expect("valid jittered prior")
}

/// Learns a PIM from a collection of same-shaped signals.
pub fn fit_pim(grids: &[SignalGrid], size: usize, cfg: &EmConfig) -> Result<PimModel> {
    let init = initialize_pim(grids, size, cfg)?;
    fit_pim_from(grids, init, cfg)
}

/// EM from an explicit starting point. Iterates E step, palette M step and
/// prior M step until the relative free-energy decrease drops below `cfg.tol`.
pub fn fit_pim_from(grids: &[SignalGrid], init: PimInit, cfg: &EmConfig) -> Result<PimModel> {
    cfg.validate()?;
    let size = init.prior.size();
    validate_collection(grids, size)?;
    if init.palettes.len() != grids.len() {
        return Err(PimError::InvalidInput(format!(
            "{} initial palettes for {} signals",
            init.palettes.len(),
            grids.len()
        )));
    }
    let PimInit {
        mut prior,
        mut palettes,
    } = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut fallbacks: Vec<Option<Palette>> = vec![None; grids.len()];

    let e_phase =
        |palettes: &[Palette], prior: &IndexPrior| -> Result<(Vec<Responsibilities>, f64)> {
            let out: Vec<(Responsibilities, f64)> = grids
                .par_iter()
                .zip(palettes.par_iter())
                .map(|(g, pal)| {
                    let q = e_step(g, pal, prior)?;
                    let f = signal_free_energy(g, pal, prior, &q)?;
                    Ok((q, f))
                })
                .collect::<Result<_>>()?;
            let total = out.iter().map(|(_, f)| f).sum();
            Ok((out.into_iter().map(|(q, _)| q).collect(), total))
        };

    loop {
        let (mut resps, mut energy) = e_phase(&palettes, &prior)?;
        if let Some(&previous) = trace.last() {
            if energy > previous && fallbacks.iter().any(Option::is_some) {
                for (pal, fb) in palettes.iter_mut().zip(fallbacks.iter_mut()) {
                    if let Some(fb) = fb.take() {
                        *pal = fb;
                    }
                }
                (resps, energy) = e_phase(&palettes, &prior)?;
            }
        }
        fallbacks.iter_mut().for_each(|f| *f = None);
        let done = match trace.last() {
            Some(&previous) => cfg.converged(previous, energy),
            None => false,
        };
        trace.push(energy);
        if done || trace.len() >= cfg.max_iters {
            return Ok(PimModel {
                prior,
                palette_size: size,
                palettes,
                final_free_energy: energy,
                trace,
            });
        }
        let updates: Vec<_> = grids
            .par_iter()
            .zip(resps.par_iter())
            .zip(palettes.par_iter())
            .map(|((g, q), prev)| weighted_palette(g, size, |loc, s| q.at(loc)[s], Some(prev), cfg))
            .collect();
        for ((pal, fb), update) in palettes.iter_mut().zip(fallbacks.iter_mut()).zip(updates) {
            *pal = update.palette;
            *fb = update.fallback;
        }
        prior = m_step_prior(&resps, cfg.prior_floor)?;
    }
}

/// Palette and posterior re-inferred for one signal against a frozen prior.
#[derive(Debug, Clone, PartialEq)]
pub struct PaletteFit {
    pub palette: Palette,
    pub resps: Responsibilities,
    pub free_energy: f64,
    pub trace: Vec<f64>,
}

/// Alternates the E step and the palette M step with the prior held fixed.
///
/// The palette starts from prior-weighted moments of the signal, which ties
/// entry labels to the prior rather than to an arbitrary clustering order.
pub fn infer_palette(grid: &SignalGrid, prior: &IndexPrior, cfg: &EmConfig) -> Result<PaletteFit> {
    cfg.validate()?;
    prior.ensure_dims(grid.height(), grid.width())?;
    let size = prior.size();
    let mut palette = weighted_palette(grid, size, |loc, s| prior.at(loc)[s], None, cfg).palette;
    let mut fallback: Option<Palette> = None;
    let mut trace: Vec<f64> = Vec::new();
    loop {
        let mut resps = e_step(grid, &palette, prior)?;
        let mut energy = signal_free_energy(grid, &palette, prior, &resps)?;
        if let (Some(&previous), Some(fb)) = (trace.last(), fallback.take()) {
            if energy > previous {
                palette = fb;
                resps = e_step(grid, &palette, prior)?;
                energy = signal_free_energy(grid, &palette, prior, &resps)?;
            }
        }
        let done = trace.last().is_some_and(|&p| cfg.converged(p, energy));
        trace.push(energy);
        if done || trace.len() >= cfg.max_iters {
            return Ok(PaletteFit {
                palette,
                resps,
                free_energy: energy,
                trace,
            });
        }
        let update = weighted_palette(grid, size, |loc, s| resps.at(loc)[s], Some(&palette), cfg);
        palette = update.palette;
        fallback = update.fallback;
    }
}

impl PimModel {
    /// Posterior index maps of the training signals under the stored palettes.
    pub fn responsibilities(&self, grids: &[SignalGrid]) -> Result<Vec<Responsibilities>> {
        if grids.len() != self.palettes.len() {
            return Err(PimError::InvalidInput(format!(
                "{} grids for a model trained on {}",
                grids.len(),
                self.palettes.len()
            )));
        }
        grids
            .par_iter()
            .zip(self.palettes.par_iter())
            .map(|(g, pal)| e_step(g, pal, &self.prior))
            .collect()
    }

    /// Most probable index per location of the learned prior.
    pub fn index_map(&self) -> Vec<usize> {
        self.prior.argmax_map()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(m: f64, v: f64) -> PaletteEntry {
        PaletteEntry::new(vec![m], vec![v]).unwrap()
    }

    #[test]
    fn single_entry_gives_certain_responsibilities() {
        let grid = SignalGrid::new(2, 2, 1, vec![0.1, 3.0, -2.0, 7.0]).unwrap();
        let pal = Palette::new(vec![entry(0.0, 1.0)]).unwrap();
        let q = e_step(&grid, &pal, &CategoricalGrid::uniform(2, 2, 1)).unwrap();
        assert!(q.probs().iter().all(|&p| p == 1.0));
    }

    #[test]
    fn identical_entries_split_evenly() {
        let grid = SignalGrid::new(1, 3, 1, vec![0.1, 3.0, -2.0]).unwrap();
        let pal = Palette::new(vec![entry(0.5, 2.0), entry(0.5, 2.0)]).unwrap();
        let q = e_step(&grid, &pal, &CategoricalGrid::uniform(1, 3, 2)).unwrap();
        assert!(q.probs().iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn e_step_hand_value() {
        // log-lik gap is exactly 50 nats, so q1 = 1 / (1 + e^-50)
        let grid = SignalGrid::new(1, 1, 1, vec![0.0]).unwrap();
        let pal = Palette::new(vec![entry(0.0, 1.0), entry(10.0, 1.0)]).unwrap();
        let q = e_step(&grid, &pal, &CategoricalGrid::uniform(1, 1, 2)).unwrap();
        let expected = 1.0 / (1.0 + (-50f64).exp());
        assert!((q.at(0)[0] - expected).abs() < 1e-15);
        assert!((q.at(0)[1] - (-50f64).exp() / (1.0 + (-50f64).exp())).abs() < 1e-30);
    }

    #[test]
    fn e_step_reports_mismatched_axes() {
        let grid = SignalGrid::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let pal = Palette::new(vec![entry(0.0, 1.0)]).unwrap();
        let err = e_step(&grid, &pal, &CategoricalGrid::uniform(2, 3, 1)).unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        let err = e_step(&grid, &pal, &CategoricalGrid::uniform(2, 2, 2)).unwrap_err();
        assert!(err.to_string().contains("palette size"), "{err}");
    }

    #[test]
    fn prior_update_averages() {
        let a = CategoricalGrid::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let b = CategoricalGrid::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let p = m_step_prior(&[a.clone(), b], 1e-6).unwrap();
        assert!((p.at(0)[0] - 0.5).abs() < 1e-15);
        let same = m_step_prior(&[a.clone(), a.clone()], 0.0).unwrap();
        assert_eq!(same, a);
        assert!(matches!(
            m_step_prior(&[], 1e-6),
            Err(PimError::InvalidInput(_))
        ));
    }

    #[test]
    fn prior_floor_holds_after_update() {
        let a = CategoricalGrid::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let p = m_step_prior(&[a], 1e-6).unwrap();
        assert!(p.probs().iter().all(|&x| x >= 1e-6));
        assert!(p.max_row_error() < 1e-12);
    }

    #[test]
    fn harden_examples() {
        let floor = 1e-6;
        let p = CategoricalGrid::new(1, 3, 2, vec![0.2, 0.8, 0.5, 0.5, 0.9, 0.1]).unwrap();
        let h = harden_prior(&p, floor);
        assert_eq!(h.at(0)[0], floor);
        assert!((h.at(0)[1] - (1.0 - floor)).abs() < 1e-15);
        assert_eq!(h.argmax_map(), vec![1, 0, 0]);
        let u = harden_prior(&CategoricalGrid::uniform(1, 1, 3), floor);
        assert_eq!(u.argmax_map(), vec![0]);
        assert!(u.max_row_error() < 1e-15);
    }

    #[test]
    fn single_signal_single_entry_converges_to_sample_moments() {
        let grid = SignalGrid::new(2, 3, 1, vec![0.1, 0.4, 0.2, 0.9, 0.5, 0.3]).unwrap();
        let model = fit_pim(std::slice::from_ref(&grid), 1, &EmConfig::default()).unwrap();
        assert!(model.trace.len() <= 3, "{:?}", model.trace);
        let e = &model.palettes[0].entries[0];
        assert!((e.mean[0] - grid.mean()[0]).abs() < 1e-12);
        assert!((e.variance[0] - grid.variance()[0]).abs() < 1e-12);
    }

    #[test]
    fn fit_rejects_inconsistent_grids() {
        let a = SignalGrid::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let b = SignalGrid::new(2, 3, 1, vec![0.0; 6]).unwrap();
        let err = fit_pim(&[a, b], 2, &EmConfig::default()).unwrap_err();
        assert!(matches!(err, PimError::InvalidInput(_)));
        assert!(matches!(
            fit_pim(&[], 2, &EmConfig::default()),
            Err(PimError::InvalidInput(_))
        ));
    }

    #[test]
    fn label_alignment_follows_consensus() {
        let maps = vec![vec![0, 0, 1, 1], vec![1, 1, 0, 0], vec![0, 0, 1, 1]];
        let perms = align_label_maps(&maps, 2);
        assert_eq!(perms[0], vec![0, 1]);
        assert_eq!(perms[1], vec![1, 0]);
        assert_eq!(perms[2], vec![0, 1]);
    }
}
