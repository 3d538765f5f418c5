//! PIM-observation hidden Markov model for spectrogram-like signals.
//!
//! Rows of the grid are frequency bands, columns are frames. A hidden state
//! `c_j` per frame selects, for every band `i`, an index distribution
//! `p(s | c, i)`; each band of each utterance has its own one-dimensional
//! palette. The posterior keeps the exact chain structure over states
//! (forward-backward) and factorizes the indices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{best_assignment, kmeans};
use crate::config::EmConfig;
use crate::error::{PimError, Result};
use crate::grid::{argmax, CategoricalGrid, Responsibilities, SignalGrid};
use crate::math::{project_floored, softmax_in_place, xlog_ratio, xlogx};
use crate::palette::{log_likelihood_table, weighted_palette, Palette, PaletteEntry};

/// Default palette size per band.
pub const DEFAULT_BAND_PALETTE_SIZE: usize = 7;

/// State-transition structure used at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Topology {
    /// Self-loops and forward steps only, starting in state 0.
    #[default]
    LeftToRight,
    /// Every transition allowed.
    Ergodic,
}

/// One palette per band of one utterance.
pub type BandPalettes = Vec<Palette>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PimHmm {
    pub num_states: usize,
    pub palette_size: usize,
    pub initial: Vec<f64>,
    /// Row-stochastic `K x K`.
    pub transitions: Vec<Vec<f64>>,
    /// `p(s | c, i)` as `[band][state][s]`.
    pub index_priors: Vec<Vec<Vec<f64>>>,
}

impl PimHmm {
    pub fn bands(&self) -> usize {
        self.index_priors.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_states;
        let bad = |what: &str| Err(PimError::Config(format!("PIM-HMM: {what}")));
        if k == 0 || self.palette_size == 0 || self.index_priors.is_empty() {
            return bad("states, palette size and bands must be positive");
        }
        let is_dist = |v: &[f64]| {
            v.iter().all(|p| *p >= 0.0 && p.is_finite())
                && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9
        };
        if self.initial.len() != k || !is_dist(&self.initial) {
            return bad("initial distribution must have one entry per state and sum to one");
        }
        if self.transitions.len() != k
            || self.transitions.iter().any(|r| r.len() != k || !is_dist(r))
        {
            return bad("transitions must be a row-stochastic K x K matrix");
        }
        for band in &self.index_priors {
            if band.len() != k
                || band
                    .iter()
                    .any(|p| p.len() != self.palette_size || !is_dist(p))
            {
                return bad("index priors must hold one distribution over S per band and state");
            }
        }
        Ok(())
    }

    fn check_utterance(&self, utt: &SignalGrid, palettes: &[Palette]) -> Result<()> {
        check_spectrogram(utt)?;
        if utt.height() != self.bands() {
            return Err(PimError::InvalidInput(format!(
                "utterance has {} bands, model has {}",
                utt.height(),
                self.bands()
            )));
        }
        if palettes.len() != self.bands() {
            return Err(PimError::InvalidInput(format!(
                "{} band palettes for {} bands",
                palettes.len(),
                self.bands()
            )));
        }
        for p in palettes {
            if p.size() != self.palette_size || p.dim() != 1 {
                return Err(PimError::InvalidInput(format!(
                    "band palette must hold {} one-dimensional entries",
                    self.palette_size
                )));
            }
        }
        Ok(())
    }

    /// `ln p(s | c, i)` as `[band][state][s]`.
    fn log_priors(&self) -> Vec<Vec<Vec<f64>>> {
        self.index_priors
            .iter()
            .map(|band| {
                band.iter()
                    .map(|p| p.iter().map(|v| v.ln()).collect())
                    .collect()
            })
            .collect()
    }
}

fn check_spectrogram(utt: &SignalGrid) -> Result<()> {
    if utt.dim() != 1 {
        return Err(PimError::InvalidInput(format!(
            "spectrograms carry one value per cell, got dimension {}",
            utt.dim()
        )));
    }
    Ok(())
}

/// Smoothed chain posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardBackward {
    /// `J x K`.
    pub gamma: Vec<Vec<f64>>,
    /// `(J - 1) x K x K`, `xi[j][a][b] = q(c_j = a, c_{j+1} = b)`.
    pub xi: Vec<Vec<Vec<f64>>>,
    /// `ln sum_paths p(path) prod_j exp(log_emission[j][c_j])`.
    pub log_normalizer: f64,
}

/// Scaled forward-backward recursion.
pub fn forward_backward(
    log_emission: &[Vec<f64>],
    initial: &[f64],
    transitions: &[Vec<f64>],
) -> Result<ForwardBackward> {
    let k = initial.len();
    let frames = log_emission.len();
    if frames == 0 {
        return Err(PimError::InvalidInput(
            "forward-backward needs at least one frame".into(),
        ));
    }
    if transitions.len() != k || log_emission.iter().any(|e| e.len() != k) {
        return Err(PimError::InvalidInput(
            "forward-backward: state counts disagree".into(),
        ));
    }
    let mut emission = Vec::with_capacity(frames);
    let mut log_norm = 0.0;
    for e in log_emission {
        let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return Err(PimError::InvalidInput(
                "log emissions must be finite".into(),
            ));
        }
        log_norm += m;
        emission.push(e.iter().map(|v| (v - m).exp()).collect::<Vec<f64>>());
    }

    let mut alpha = vec![vec![0.0; k]; frames];
    let mut scale = vec![0.0; frames];
    for j in 0..frames {
        for b in 0..k {
            let reach = if j == 0 {
                initial[b]
            } else {
                (0..k).map(|a| alpha[j - 1][a] * transitions[a][b]).sum()
            };
            alpha[j][b] = reach * emission[j][b];
        }
        scale[j] = alpha[j].iter().sum();
        if !(scale[j] > 0.0) {
            return Err(PimError::InvalidInput(
                "observation sequence has zero probability".into(),
            ));
        }
        alpha[j].iter_mut().for_each(|v| *v /= scale[j]);
        log_norm += scale[j].ln();
    }

    let mut beta = vec![vec![1.0; k]; frames];
    for j in (0..frames - 1).rev() {
        for a in 0..k {
            beta[j][a] = (0..k)
                .map(|b| transitions[a][b] * emission[j + 1][b] * beta[j + 1][b])
                .sum::<f64>()
                / scale[j + 1];
        }
    }

    let gamma = (0..frames)
        .map(|j| {
            let mut g: Vec<f64> = (0..k).map(|c| alpha[j][c] * beta[j][c]).collect();
            let z: f64 = g.iter().sum();
            g.iter_mut().for_each(|v| *v /= z);
            g
        })
        .collect();
    let xi = (0..frames - 1)
        .map(|j| {
            let mut x: Vec<Vec<f64>> = (0..k)
                .map(|a| {
                    (0..k)
                        .map(|b| {
                            alpha[j][a] * transitions[a][b] * emission[j + 1][b] * beta[j + 1][b]
                                / scale[j + 1]
                        })
                        .collect()
                })
                .collect();
            let z: f64 = x.iter().flatten().sum();
            x.iter_mut().flatten().for_each(|v| *v /= z);
            x
        })
        .collect();
    Ok(ForwardBackward {
        gamma,
        xi,
        log_normalizer: log_norm,
    })
}

/// Variational posterior for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmPosterior {
    pub gamma: Vec<Vec<f64>>,
    pub xi: Vec<Vec<Vec<f64>>>,
    /// `q(s_ij)`, bands by frames.
    pub q_indices: Responsibilities,
}

impl HmmPosterior {
    /// Most probable state per frame.
    pub fn state_path(&self) -> Vec<usize> {
        self.gamma.iter().map(|g| argmax(g)).collect()
    }
}

/// `e[j][c] = sum_i sum_s q(s_ij) ln p(s | c, i)`.
fn expected_log_emission(
    model: &PimHmm,
    log_priors: &[Vec<Vec<f64>>],
    q: &Responsibilities,
) -> Vec<Vec<f64>> {
    let (bands, frames) = (q.height(), q.width());
    (0..frames)
        .map(|j| {
            (0..model.num_states)
                .map(|c| {
                    (0..bands)
                        .map(|i| {
                            q.at(i * frames + j)
                                .iter()
                                .zip(&log_priors[i][c])
                                .map(|(w, lp)| if *w > 0.0 { w * lp } else { 0.0 })
                                .sum::<f64>()
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

/// Log-likelihood tables per band, `[band][j * S + s]`.
fn band_tables(utt: &SignalGrid, palettes: &[Palette]) -> Vec<Vec<f64>> {
    (0..utt.height())
        .map(|i| log_likelihood_table(&utt.row(i), &palettes[i]))
        .collect()
}

fn update_indices(
    model: &PimHmm,
    log_priors: &[Vec<Vec<f64>>],
    tables: &[Vec<f64>],
    gamma: &[Vec<f64>],
) -> Responsibilities {
    let (bands, frames, size) = (tables.len(), gamma.len(), model.palette_size);
    let mut probs = Vec::with_capacity(bands * frames * size);
    for (i, table) in tables.iter().enumerate() {
        for (j, g) in gamma.iter().enumerate() {
            let mut logits: Vec<f64> = (0..size)
                .map(|s| {
                    let prior: f64 = g.iter().zip(&log_priors[i]).map(|(w, lp)| w * lp[s]).sum();
                    prior + table[j * size + s]
                })
                .collect();
            softmax_in_place(&mut logits);
            probs.extend(logits);
        }
    }
    CategoricalGrid::new(bands, frames, size, probs).expect("normalized rows")
}

fn free_energy_parts(
    model: &PimHmm,
    log_priors: &[Vec<Vec<f64>>],
    tables: &[Vec<f64>],
    post: &HmmPosterior,
) -> f64 {
    let size = model.palette_size;
    let mut chain: f64 = post.gamma[0]
        .iter()
        .zip(&model.initial)
        .map(|(&g, &p)| xlog_ratio(g, p))
        .sum();
    // Transition conditionals come from the pairwise marginals themselves,
    // which keeps the term finite when tiny state marginals underflow.
    for x in &post.xi {
        for (a, row) in x.iter().enumerate() {
            let out: f64 = row.iter().sum();
            for (b, &v) in row.iter().enumerate() {
                if v > 0.0 {
                    chain += v * ((v / out).ln() - model.transitions[a][b].ln());
                }
            }
        }
    }
    let emission = expected_log_emission(model, log_priors, &post.q_indices);
    let expected_prior: f64 = post
        .gamma
        .iter()
        .zip(&emission)
        .map(|(g, e)| g.iter().zip(e).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let frames = post.gamma.len();
    let mut index_terms = 0.0;
    for (i, table) in tables.iter().enumerate() {
        for j in 0..frames {
            let q = post.q_indices.at(i * frames + j);
            for s in 0..size {
                if q[s] > 0.0 {
                    index_terms += xlogx(q[s]) - q[s] * table[j * size + s];
                }
            }
        }
    }
    chain - expected_prior + index_terms
}

/// Free energy of one utterance under a model, band palettes and posterior.
pub fn hmm_free_energy(
    utt: &SignalGrid,
    model: &PimHmm,
    palettes: &[Palette],
    post: &HmmPosterior,
) -> Result<f64> {
    model.check_utterance(utt, palettes)?;
    let tables = band_tables(utt, palettes);
    Ok(free_energy_parts(model, &model.log_priors(), &tables, post))
}

/// Frame `j` of `frames` assigned evenly to `k` consecutive states.
fn uniform_segmentation(frames: usize, k: usize) -> Vec<Vec<f64>> {
    (0..frames)
        .map(|j| {
            let mut g = vec![0.0; k];
            g[(j * k / frames).min(k - 1)] = 1.0;
            g
        })
        .collect()
}

fn cold_posterior(
    model: &PimHmm,
    log_priors: &[Vec<Vec<f64>>],
    tables: &[Vec<f64>],
    frames: usize,
) -> Result<HmmPosterior> {
    let gamma = uniform_segmentation(frames, model.num_states);
    let q_indices = update_indices(model, log_priors, tables, &gamma);
    let fb = forward_backward(
        &expected_log_emission(model, log_priors, &q_indices),
        &model.initial,
        &model.transitions,
    )?;
    Ok(HmmPosterior {
        gamma: fb.gamma,
        xi: fb.xi,
        q_indices,
    })
}

/// Sweeps (indices, then chain) from `post`; returns the final free energy.
fn refine(
    model: &PimHmm,
    log_priors: &[Vec<Vec<f64>>],
    tables: &[Vec<f64>],
    post: &mut HmmPosterior,
    cfg: &EmConfig,
) -> Result<f64> {
    let mut energy = free_energy_parts(model, log_priors, tables, post);
    for _ in 0..cfg.inner_max_iters {
        post.q_indices = update_indices(model, log_priors, tables, &post.gamma);
        let fb = forward_backward(
            &expected_log_emission(model, log_priors, &post.q_indices),
            &model.initial,
            &model.transitions,
        )?;
        post.gamma = fb.gamma;
        post.xi = fb.xi;
        let next = free_energy_parts(model, log_priors, tables, post);
        let change = energy - next;
        energy = next;
        if change.abs() <= cfg.inner_tol * energy.abs().max(1.0) {
            break;
        }
    }
    Ok(energy)
}

/// Structured variational E step for one utterance from a cold start
/// (uniform segmentation of the frames over the states).
pub fn hmm_e_step(
    utt: &SignalGrid,
    model: &PimHmm,
    palettes: &[Palette],
    cfg: &EmConfig,
) -> Result<HmmPosterior> {
    model.validate()?;
    model.check_utterance(utt, palettes)?;
    let log_priors = model.log_priors();
    let tables = band_tables(utt, palettes);
    let mut post = cold_posterior(model, &log_priors, &tables, utt.width())?;
    refine(model, &log_priors, &tables, &mut post, cfg)?;
    Ok(post)
}

/// Per-band palette M step; `fallbacks` receives the non-reseeding variants.
fn band_palette_update(
    utt: &SignalGrid,
    q: &Responsibilities,
    previous: Option<&[Palette]>,
    size: usize,
    cfg: &EmConfig,
) -> (Vec<Palette>, Option<Vec<Palette>>) {
    let frames = utt.width();
    let updates: Vec<_> = (0..utt.height())
        .map(|i| {
            weighted_palette(
                &utt.row(i),
                size,
                |j, s| q.at(i * frames + j)[s],
                previous.map(|p| &p[i]),
                cfg,
            )
        })
        .collect();
    let fallback = updates.iter().any(|u| u.fallback.is_some()).then(|| {
        updates
            .iter()
            .map(|u| u.fallback.clone().unwrap_or_else(|| u.palette.clone()))
            .collect()
    });
    (updates.into_iter().map(|u| u.palette).collect(), fallback)
}

/// Relabels each band's palette entries, jointly with `q(s_ij)`, by the
/// permutation that best fits the index priors under the current state
/// posterior. Only the prior term of the free energy depends on the labels,
/// so this is an exact assignment problem and never raises the free energy.
fn relabel_bands(
    model: &PimHmm,
    log_priors: &[Vec<Vec<f64>>],
    post: &mut HmmPosterior,
    palettes: &mut [Palette],
) {
    let size = model.palette_size;
    let frames = post.gamma.len();
    for (i, palette) in palettes.iter_mut().enumerate() {
        let mut score = vec![vec![0.0; size]; size];
        for (j, g) in post.gamma.iter().enumerate() {
            let q = post.q_indices.at(i * frames + j);
            for (c, &gc) in g.iter().enumerate() {
                if gc == 0.0 {
                    continue;
                }
                for (a, &qa) in q.iter().enumerate() {
                    if qa == 0.0 {
                        continue;
                    }
                    for (b, lp) in log_priors[i][c].iter().enumerate() {
                        score[a][b] += gc * qa * lp;
                    }
                }
            }
        }
        let perm = best_assignment(&score);
        let gain: f64 = (0..size).map(|a| score[a][perm[a]] - score[a][a]).sum();
        if !(gain > 1e-12 * score.iter().flatten().map(|v| v.abs()).sum::<f64>()) {
            continue;
        }
        *palette = palette.permuted(&perm);
        for j in 0..frames {
            let row = post.q_indices.at_mut(i * frames + j);
            let old = row.to_vec();
            for (a, &v) in old.iter().enumerate() {
                row[perm[a]] = v;
            }
        }
    }
}

/// Palettes and posterior for one utterance with model parameters frozen.
#[derive(Debug, Clone)]
pub struct UtteranceFit {
    pub palettes: BandPalettes,
    pub posterior: HmmPosterior,
    pub free_energy: f64,
    pub trace: Vec<f64>,
}

/// Infers band palettes and the posterior for an unseen utterance.
///
/// Palettes start from moments weighted by the uniform-segmentation index
/// prior, so entry labels follow the model rather than an arbitrary order.
pub fn infer_utterance(utt: &SignalGrid, model: &PimHmm, cfg: &EmConfig) -> Result<UtteranceFit> {
    cfg.validate()?;
    model.validate()?;
    check_spectrogram(utt)?;
    if utt.height() != model.bands() {
        return Err(PimError::InvalidInput(format!(
            "utterance has {} bands, model has {}",
            utt.height(),
            model.bands()
        )));
    }
    let size = model.palette_size;
    let frames = utt.width();
    let log_priors = model.log_priors();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut palettes = Vec::with_capacity(model.bands());
    let mut probs = Vec::with_capacity(model.bands() * frames * size);
    for i in 0..model.bands() {
        let row = utt.row(i);
        let km = kmeans(&row, size, cfg.kmeans_iters, &mut rng);
        palettes.push(
            weighted_palette(
                &row,
                size,
                |j, s| if km.labels[j] == s { 1.0 } else { 0.0 },
                None,
                cfg,
            )
            .palette,
        );
        for &l in &km.labels {
            probs.extend((0..size).map(|s| if s == l { 1.0 } else { 0.0 }));
        }
    }
    let mut post = HmmPosterior {
        gamma: uniform_segmentation(frames, model.num_states),
        xi: Vec::new(),
        q_indices: CategoricalGrid::new(model.bands(), frames, size, probs)?,
    };
    relabel_bands(model, &log_priors, &mut post, &mut palettes);
    infer_utterance_from(utt, model, palettes, cfg)
}

/// [`infer_utterance`] from given starting band palettes.
pub fn infer_utterance_from(
    utt: &SignalGrid,
    model: &PimHmm,
    palettes: BandPalettes,
    cfg: &EmConfig,
) -> Result<UtteranceFit> {
    cfg.validate()?;
    model.validate()?;
    model.check_utterance(utt, &palettes)?;
    let size = model.palette_size;
    let log_priors = model.log_priors();
    let mut palettes = palettes;
    let mut tables = band_tables(utt, &palettes);
    let mut post = cold_posterior(model, &log_priors, &tables, utt.width())?;
    let mut fallback: Option<Vec<Palette>> = None;
    let mut saved = post.clone();
    let mut trace: Vec<f64> = Vec::new();
    loop {
        let mut energy = refine(model, &log_priors, &tables, &mut post, cfg)?;
        if let (Some(&previous), Some(fb)) = (trace.last(), fallback.take()) {
            if energy > previous {
                palettes = fb;
                tables = band_tables(utt, &palettes);
                post = saved.clone();
                energy = refine(model, &log_priors, &tables, &mut post, cfg)?;
            }
        }
        let done = trace.last().is_some_and(|&p| cfg.converged(p, energy));
        trace.push(energy);
        if done || trace.len() >= cfg.max_iters {
            return Ok(UtteranceFit {
                palettes,
                posterior: post,
                free_energy: energy,
                trace,
            });
        }
        relabel_bands(model, &log_priors, &mut post, &mut palettes);
        let (next, fb) = band_palette_update(utt, &post.q_indices, Some(&palettes), size, cfg);
        saved = post.clone();
        palettes = next;
        fallback = fb;
        tables = band_tables(utt, &palettes);
    }
}

/// Best model by converged free energy (lowest wins, ties to the lowest
/// index), with every model's free energy.
pub fn classify_utterance(
    utt: &SignalGrid,
    models: &[PimHmm],
    cfg: &EmConfig,
) -> Result<(usize, Vec<f64>)> {
    if models.is_empty() {
        return Err(PimError::InvalidInput(
            "classification needs at least one model".into(),
        ));
    }
    let energies = models
        .par_iter()
        .map(|m| infer_utterance(utt, m, cfg).map(|f| f.free_energy))
        .collect::<Result<Vec<f64>>>()?;
    let best = argmax(&energies.iter().map(|f| -f).collect::<Vec<_>>());
    Ok((best, energies))
}

/// Output of [`fit_pim_hmm`].
#[derive(Debug, Clone)]
pub struct HmmFit {
    pub model: PimHmm,
    pub palettes: Vec<BandPalettes>,
    pub posteriors: Vec<HmmPosterior>,
    pub final_free_energy: f64,
    pub trace: Vec<f64>,
}

/// Starting point for [`fit_pim_hmm_from`].
#[derive(Debug, Clone)]
pub struct HmmInit {
    pub model: PimHmm,
    pub palettes: Vec<BandPalettes>,
}

fn validate_utterances(utterances: &[SignalGrid]) -> Result<()> {
    let first = utterances
        .first()
        .ok_or_else(|| PimError::InvalidInput("need at least one utterance".into()))?;
    for (t, u) in utterances.iter().enumerate() {
        check_spectrogram(u)?;
        if u.height() != first.height() {
            return Err(PimError::InvalidInput(format!(
                "utterance {t} has {} bands, utterance 0 has {}",
                u.height(),
                first.height()
            )));
        }
    }
    Ok(())
}

/// Initial transition structure for mean state duration `duration`.
fn initial_chain(
    k: usize,
    duration: f64,
    topology: Topology,
    floor: f64,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut initial = vec![0.0; k];
    let mut transitions = vec![vec![0.0; k]; k];
    match topology {
        Topology::LeftToRight => {
            initial[0] = 1.0;
            let stay = (1.0 - 1.0 / duration.max(1.0)).clamp(0.0, 1.0);
            for (c, row) in transitions.iter_mut().enumerate() {
                if c + 1 < k {
                    row[c] = stay;
                    row[c + 1] = 1.0 - stay;
                } else {
                    row[c] = 1.0;
                }
            }
        }
        Topology::Ergodic => {
            initial.iter_mut().for_each(|p| *p = 1.0 / k as f64);
            transitions
                .iter_mut()
                .flatten()
                .for_each(|p| *p = 1.0 / k as f64);
        }
    }
    project_floored(&mut initial, floor);
    transitions
        .iter_mut()
        .for_each(|r| project_floored(r, floor));
    (initial, transitions)
}

/// Seeded initialization: uniform segmentation, per-band k-means palettes
/// with labels aligned across utterances by their state co-occurrence, and
/// index priors from the aligned counts (plus `cfg.prior_jitter` noise).
pub fn initialize_pim_hmm(
    utterances: &[SignalGrid],
    states: usize,
    size: usize,
    topology: Topology,
    cfg: &EmConfig,
) -> Result<HmmInit> {
    cfg.validate()?;
    validate_utterances(utterances)?;
    if states == 0 || size == 0 {
        return Err(PimError::Config(
            "states and palette size must be positive".into(),
        ));
    }
    let bands = utterances[0].height();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let segments: Vec<Vec<usize>> = utterances
        .iter()
        .map(|u| {
            (0..u.width())
                .map(|j| (j * states / u.width()).min(states - 1))
                .collect()
        })
        .collect();
    let mut palettes: Vec<BandPalettes> = vec![Vec::with_capacity(bands); utterances.len()];
    let mut index_priors = Vec::with_capacity(bands);
    for i in 0..bands {
        // consensus[c][s]: aligned label counts per state
        let mut consensus = vec![vec![0.0; size]; states];
        for (t, u) in utterances.iter().enumerate() {
            let row = u.row(i);
            let km = kmeans(&row, size, cfg.kmeans_iters, &mut rng);
            let mut counts = vec![vec![0.0; size]; states];
            for (j, &l) in km.labels.iter().enumerate() {
                counts[segments[t][j]][l] += 1.0;
            }
            // perm[own label] = consensus label
            let perm = if t == 0 {
                (0..size).collect()
            } else {
                let score: Vec<Vec<f64>> = (0..size)
                    .map(|a| {
                        (0..size)
                            .map(|b| (0..states).map(|c| counts[c][a] * consensus[c][b]).sum())
                            .collect()
                    })
                    .collect();
                best_assignment(&score)
            };
            for c in 0..states {
                for a in 0..size {
                    consensus[c][perm[a]] += counts[c][a];
                }
            }
            let labels: Vec<usize> = km.labels.iter().map(|&l| perm[l]).collect();
            let weight = |j: usize, s: usize| if labels[j] == s { 1.0 } else { 0.0 };
            palettes[t].push(weighted_palette(&row, size, weight, None, cfg).palette);
        }
        let priors: Vec<Vec<f64>> = consensus
            .into_iter()
            .map(|mut row| {
                let total: f64 = row.iter().sum();
                for p in row.iter_mut() {
                    *p =
                        (*p + 1.0) / (total + size as f64) + cfg.prior_jitter * rng.random::<f64>();
                }
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= z);
                project_floored(&mut row, cfg.prior_floor);
                row
            })
            .collect();
        index_priors.push(priors);
    }
    let mean_frames =
        utterances.iter().map(|u| u.width()).sum::<usize>() as f64 / utterances.len() as f64;
    let (initial, transitions) = initial_chain(
        states,
        mean_frames / states as f64,
        topology,
        cfg.transition_floor,
    );
    Ok(HmmInit {
        model: PimHmm {
            num_states: states,
            palette_size: size,
            initial,
            transitions,
            index_priors,
        },
        palettes,
    })
}

/// Learns a PIM-HMM with the default initialization.
pub fn fit_pim_hmm(
    utterances: &[SignalGrid],
    states: usize,
    size: usize,
    topology: Topology,
    cfg: &EmConfig,
) -> Result<HmmFit> {
    let init = initialize_pim_hmm(utterances, states, size, topology, cfg)?;
    fit_pim_hmm_from(utterances, init, cfg)
}

fn m_step_model(model: &PimHmm, posteriors: &[HmmPosterior], cfg: &EmConfig) -> PimHmm {
    let (k, size, bands) = (model.num_states, model.palette_size, model.bands());
    let mut initial = vec![0.0; k];
    let mut transitions = vec![vec![0.0; k]; k];
    let mut index_priors = vec![vec![vec![0.0; size]; k]; bands];
    for post in posteriors {
        initial
            .iter_mut()
            .zip(&post.gamma[0])
            .for_each(|(a, g)| *a += g);
        for x in &post.xi {
            for (row, xr) in transitions.iter_mut().zip(x) {
                row.iter_mut().zip(xr).for_each(|(a, v)| *a += v);
            }
        }
        let frames = post.gamma.len();
        for (i, band) in index_priors.iter_mut().enumerate() {
            for (j, g) in post.gamma.iter().enumerate() {
                let q = post.q_indices.at(i * frames + j);
                for (c, acc) in band.iter_mut().enumerate() {
                    acc.iter_mut().zip(q).for_each(|(a, v)| *a += g[c] * v);
                }
            }
        }
    }
    let normalize = |row: &mut Vec<f64>, floor: f64| {
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            row.iter_mut().for_each(|v| *v /= z);
        }
        project_floored(row, floor);
    };
    normalize(&mut initial, cfg.transition_floor);
    for (c, row) in transitions.iter_mut().enumerate() {
        if row.iter().sum::<f64>() > 0.0 {
            normalize(row, cfg.transition_floor);
        } else {
            // state never left within any utterance: keep its old row
            *row = model.transitions[c].clone();
        }
    }
    for band in index_priors.iter_mut() {
        for row in band.iter_mut() {
            normalize(row, cfg.prior_floor);
        }
    }
    PimHmm {
        num_states: k,
        palette_size: size,
        initial,
        transitions,
        index_priors,
    }
}

/// Variational EM from an explicit start: E step per utterance (warm-started
/// after the first iteration), then initial/transition/index-prior updates and
/// per-utterance band palettes.
pub fn fit_pim_hmm_from(
    utterances: &[SignalGrid],
    init: HmmInit,
    cfg: &EmConfig,
) -> Result<HmmFit> {
    cfg.validate()?;
    validate_utterances(utterances)?;
    let HmmInit {
        mut model,
        mut palettes,
    } = init;
    model.validate()?;
    if palettes.len() != utterances.len() {
        return Err(PimError::InvalidInput(format!(
            "{} palette sets for {} utterances",
            palettes.len(),
            utterances.len()
        )));
    }
    for (u, p) in utterances.iter().zip(&palettes) {
        model.check_utterance(u, p)?;
    }
    let size = model.palette_size;

    let e_phase = |model: &PimHmm,
                   palettes: &[BandPalettes],
                   previous: Option<&[HmmPosterior]>|
     -> Result<(Vec<HmmPosterior>, f64)> {
        let log_priors = model.log_priors();
        let out = (0..utterances.len())
            .into_par_iter()
            .map(|t| {
                let tables = band_tables(&utterances[t], &palettes[t]);
                let mut post = match previous {
                    Some(prev) => prev[t].clone(),
                    None => cold_posterior(model, &log_priors, &tables, utterances[t].width())?,
                };
                let f = refine(model, &log_priors, &tables, &mut post, cfg)?;
                Ok((post, f))
            })
            .collect::<Result<Vec<_>>>()?;
        let total = out.iter().map(|(_, f)| f).sum();
        Ok((out.into_iter().map(|(p, _)| p).collect(), total))
    };

    let mut trace: Vec<f64> = Vec::new();
    let mut posteriors: Option<Vec<HmmPosterior>> = None;
    let mut fallbacks: Vec<Option<Vec<Palette>>> = vec![None; utterances.len()];
    loop {
        let (mut next, mut energy) = e_phase(&model, &palettes, posteriors.as_deref())?;
        if let Some(&previous) = trace.last() {
            if energy > previous && fallbacks.iter().any(Option::is_some) {
                for (pal, fb) in palettes.iter_mut().zip(fallbacks.iter_mut()) {
                    if let Some(fb) = fb.take() {
                        *pal = fb;
                    }
                }
                (next, energy) = e_phase(&model, &palettes, posteriors.as_deref())?;
            }
        }
        fallbacks.iter_mut().for_each(|f| *f = None);
        let done = trace.last().is_some_and(|&p| cfg.converged(p, energy));
        trace.push(energy);
        if done || trace.len() >= cfg.max_iters {
            return Ok(HmmFit {
                model,
                palettes,
                posteriors: next,
                final_free_energy: energy,
                trace,
            });
        }
        let log_priors = model.log_priors();
        next.par_iter_mut()
            .zip(palettes.par_iter_mut())
            .for_each(|(post, pal)| relabel_bands(&model, &log_priors, post, pal));
        let updates: Vec<_> = (0..utterances.len())
            .into_par_iter()
            .map(|t| {
                band_palette_update(
                    &utterances[t],
                    &next[t].q_indices,
                    Some(&palettes[t]),
                    size,
                    cfg,
                )
            })
            .collect();
        for ((pal, fb), (p, f)) in palettes.iter_mut().zip(fallbacks.iter_mut()).zip(updates) {
            *pal = p;
            *fb = f;
        }
        model = m_step_model(&model, &next, cfg);
        posteriors = Some(next);
    }
}

/// One-dimensional palette helper for tests and callers building models by hand.
pub fn band_palette(means: &[f64], variance: f64) -> Result<Palette> {
    Palette::new(
        means
            .iter()
            .map(|&m| PaletteEntry::new(vec![m], vec![variance]))
            .collect::<Result<Vec<_>>>()?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pim::{e_step, signal_free_energy};

    fn random_dist(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
        let z: f64 = v.iter().sum();
        v.iter_mut().for_each(|p| *p /= z);
        v
    }

    fn random_model(bands: usize, k: usize, size: usize, rng: &mut ChaCha8Rng) -> PimHmm {
        PimHmm {
            num_states: k,
            palette_size: size,
            initial: random_dist(k, rng),
            transitions: (0..k).map(|_| random_dist(k, rng)).collect(),
            index_priors: (0..bands)
                .map(|_| (0..k).map(|_| random_dist(size, rng)).collect())
                .collect(),
        }
    }

    #[test]
    fn single_state_forward_backward() {
        let e = vec![vec![-1.0], vec![-2.5], vec![0.3]];
        let fb = forward_backward(&e, &[1.0], &[vec![1.0]]).unwrap();
        assert!(fb.gamma.iter().all(|g| (g[0] - 1.0).abs() < 1e-15));
        assert!((fb.log_normalizer - (-3.2)).abs() < 1e-12);
    }

    #[test]
    fn symmetric_chain_gives_uniform_gamma() {
        let e = vec![vec![-1.0, -1.0]; 4];
        let fb = forward_backward(&e, &[0.5, 0.5], &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        for g in &fb.gamma {
            assert!((g[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn single_state_indices_match_pim_e_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(3, 1, 2, &mut rng);
        let utt = SignalGrid::from_fn(3, 5, 1, |_, _, _| rng.random::<f64>() * 5.0).unwrap();
        let palettes: Vec<Palette> = (0..3)
            .map(|i| band_palette(&[1.0 + i as f64, 4.0], 1.0).unwrap())
            .collect();
        let post = hmm_e_step(&utt, &model, &palettes, &EmConfig::default()).unwrap();
        let mut total = 0.0;
        for (i, palette) in palettes.iter().enumerate() {
            let prior = CategoricalGrid::new(1, 5, 2, model.index_priors[i][0].repeat(5)).unwrap();
            let row = utt.row(i);
            let q = e_step(&row, palette, &prior).unwrap();
            for j in 0..5 {
                for s in 0..2 {
                    assert!((q.at(j)[s] - post.q_indices.at(i * 5 + j)[s]).abs() < 1e-12);
                }
            }
            total += signal_free_energy(&row, palette, &prior, &q).unwrap();
        }
        let f = hmm_free_energy(&utt, &model, &palettes, &post).unwrap();
        assert!((f - total).abs() < 1e-9 * total.abs().max(1.0));
    }

    #[test]
    fn sweeps_never_raise_free_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let model = random_model(4, 3, 3, &mut rng);
            let utt = SignalGrid::from_fn(4, 7, 1, |_, _, _| rng.random::<f64>() * 6.0).unwrap();
            let palettes: Vec<Palette> = (0..4)
                .map(|_| band_palette(&[0.5, 3.0, 5.0], 0.7).unwrap())
                .collect();
            let log_priors = model.log_priors();
            let tables = band_tables(&utt, &palettes);
            let mut post = cold_posterior(&model, &log_priors, &tables, 7).unwrap();
            let mut last = free_energy_parts(&model, &log_priors, &tables, &post);
            let one = EmConfig {
                inner_max_iters: 1,
                ..EmConfig::default()
            };
            for _ in 0..6 {
                let f = refine(&model, &log_priors, &tables, &mut post, &one).unwrap();
                assert!(f <= last + 1e-9, "{f} > {last}");
                last = f;
            }
        }
    }

    #[test]
    fn free_energy_after_chain_update_is_minus_log_normalizer_plus_index_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = random_model(2, 2, 2, &mut rng);
        let utt = SignalGrid::from_fn(2, 4, 1, |_, _, _| rng.random::<f64>() * 4.0).unwrap();
        let palettes: Vec<Palette> = (0..2)
            .map(|_| band_palette(&[1.0, 3.0], 1.0).unwrap())
            .collect();
        let post = hmm_e_step(&utt, &model, &palettes, &EmConfig::default()).unwrap();
        let log_priors = model.log_priors();
        let tables = band_tables(&utt, &palettes);
        let fb = forward_backward(
            &expected_log_emission(&model, &log_priors, &post.q_indices),
            &model.initial,
            &model.transitions,
        )
        .unwrap();
        let mut index_terms = 0.0;
        for (i, table) in tables.iter().enumerate() {
            for j in 0..4 {
                for s in 0..2 {
                    let q = post.q_indices.at(i * 4 + j)[s];
                    index_terms += xlogx(q) - q * table[j * 2 + s];
                }
            }
        }
        let with_fresh_chain = HmmPosterior {
            gamma: fb.gamma.clone(),
            xi: fb.xi.clone(),
            q_indices: post.q_indices.clone(),
        };
        let f = free_energy_parts(&model, &log_priors, &tables, &with_fresh_chain);
        assert!((f - (index_terms - fb.log_normalizer)).abs() < 1e-9);
    }

    #[test]
    fn mismatched_band_counts_are_rejected() {
        let a = SignalGrid::new(2, 3, 1, vec![0.0; 6]).unwrap();
        let b = SignalGrid::new(3, 3, 1, vec![0.0; 9]).unwrap();
        let err =
            fit_pim_hmm(&[a, b], 2, 2, Topology::LeftToRight, &EmConfig::default()).unwrap_err();
        assert!(matches!(err, PimError::InvalidInput(_)));
    }

    #[test]
    fn duplicate_models_tie_to_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = random_model(2, 2, 2, &mut rng);
        let utt = SignalGrid::from_fn(2, 6, 1, |_, _, _| rng.random::<f64>() * 4.0).unwrap();
        let (best, f) =
            classify_utterance(&utt, &[model.clone(), model], &EmConfig::default()).unwrap();
        assert_eq!(best, 0);
        assert_eq!(f[0], f[1]);
    }
}
