//! Transformed mixture of probabilistic index maps.
//!
//! Each signal picks a class `c` and a cyclic shift `T`; the class owns an
//! index prior `p(S|c)` in its own reference frame and observed location
//! `(i, j)` reads its index from `T(i, j)`. The posterior is factorized as
//! `q(c) q(T|c) q(S|c)` with `q(S|c)` kept in the class frame, and the three
//! factors are refined by coordinate ascent on the signal's free energy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::EmConfig;
use crate::error::{PimError, Result};
use crate::grid::{argmax, CategoricalGrid, IndexPrior, Responsibilities, SignalGrid};
use crate::math::{project_floored, softmax_in_place, xlog_ratio};
use crate::palette::{log_likelihood_table, weighted_palette, Palette};
use crate::pim::{infer_palette, kmeans_palette, validate_collection, PimInit};
use crate::transform::{
    apply_transform, back_project, forward_project_into, scores_from_table, Transform, TransformSet,
};

/// Class prior, per-class index priors and the transformation family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmpimModel {
    pub class_prior: Vec<f64>,
    pub class_pims: Vec<IndexPrior>,
    pub tset: TransformSet,
    pub palette_size: usize,
}

/// Variational posterior for one signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TmpimPosterior {
    pub q_class: Vec<f64>,
    /// `C x |T|`, each row a distribution over the transform set.
    pub q_transform: Vec<Vec<f64>>,
    /// `q(S|c)` per class, in the class reference frame.
    pub q_indices: Vec<Responsibilities>,
}

impl TmpimPosterior {
    /// Most probable class (ties to the lowest index).
    pub fn class(&self) -> usize {
        argmax(&self.q_class)
    }

    /// Most probable transform under the most probable class.
    pub fn transform(&self, tset: &TransformSet) -> Transform {
        tset.transforms()[argmax(&self.q_transform[self.class()])]
    }
}

/// Output of [`fit_tmpim`].
#[derive(Debug, Clone)]
pub struct TmpimFit {
    pub model: TmpimModel,
    pub palettes: Vec<Palette>,
    pub posteriors: Vec<TmpimPosterior>,
    pub final_free_energy: f64,
    pub trace: Vec<f64>,
}

/// Starting point for [`fit_tmpim_from`].
#[derive(Debug, Clone)]
pub struct TmpimInit {
    pub model: TmpimModel,
    pub palettes: Vec<Palette>,
}

impl TmpimInit {
    /// Single class with identity-only transforms, from a basic PIM start.
    pub fn from_pim(init: &PimInit) -> Self {
        let prior = &init.prior;
        Self {
            model: TmpimModel {
                class_prior: vec![1.0],
                class_pims: vec![prior.clone()],
                tset: TransformSet::identity(prior.height(), prior.width()),
                palette_size: prior.size(),
            },
            palettes: init.palettes.clone(),
        }
    }
}

impl TmpimModel {
    pub fn num_classes(&self) -> usize {
        self.class_pims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_pims.len();
        if c == 0 || self.class_prior.len() != c {
            return Err(PimError::Config(format!(
                "{} class priors for {} class index maps",
                self.class_prior.len(),
                c
            )));
        }
        let first = &self.class_pims[0];
        for p in &self.class_pims {
            p.ensure_dims(first.height(), first.width())?;
            p.ensure_size(self.palette_size)?;
        }
        self.tset.ensure_dims(first.height(), first.width())
    }

    fn check_signal(&self, grid: &SignalGrid, palette: &Palette) -> Result<()> {
        self.validate()?;
        let first = &self.class_pims[0];
        grid.ensure_dims(first.height(), first.width())?;
        palette.ensure_matches(grid, self.palette_size)
    }
}

/// Per-class pieces of the signal free energy.
struct ClassTerms {
    /// `F_c`: transform KL + index KL - expected log-likelihood.
    energy: Vec<f64>,
}

fn class_terms(table: &[f64], model: &TmpimModel, post: &TmpimPosterior) -> ClassTerms {
    let size = model.palette_size;
    let energy = (0..model.num_classes())
        .map(|c| {
            let q_t = &post.q_transform[c];
            let transform_kl: f64 = q_t
                .iter()
                .zip(model.tset.prior())
                .map(|(&q, &p)| xlog_ratio(q, p))
                .sum();
            let q_s = &post.q_indices[c];
            let prior = &model.class_pims[c];
            let index_kl: f64 = q_s
                .probs()
                .iter()
                .zip(prior.probs())
                .map(|(&q, &p)| xlog_ratio(q, p))
                .sum();
            let scores = scores_from_table(table, q_s, &model.tset);
            let expected_ll: f64 = q_t.iter().zip(&scores).map(|(q, s)| q * s).sum();
            debug_assert_eq!(q_s.size(), size);
            transform_kl + index_kl - expected_ll
        })
        .collect();
    ClassTerms { energy }
}

fn total_energy(model: &TmpimModel, post: &TmpimPosterior, terms: &ClassTerms) -> f64 {
    post.q_class
        .iter()
        .zip(&model.class_prior)
        .zip(&terms.energy)
        .map(|((&q, &p), &f)| xlog_ratio(q, p) + q * f)
        .sum()
}

/// Free energy of one signal under a model, palette and posterior.
pub fn tmpim_signal_free_energy(
    grid: &SignalGrid,
    palette: &Palette,
    model: &TmpimModel,
    post: &TmpimPosterior,
) -> Result<f64> {
    model.check_signal(grid, palette)?;
    let table = log_likelihood_table(grid, palette);
    Ok(total_energy(model, post, &class_terms(&table, model, post)))
}

fn update_indices(table: &[f64], model: &TmpimModel, post: &mut TmpimPosterior) {
    let size = model.palette_size;
    for c in 0..model.num_classes() {
        let mut logits = back_project(table, &post.q_transform[c], &model.tset, size);
        let prior = &model.class_pims[c];
        for (loc, row) in logits.chunks_mut(size).enumerate() {
            for (w, &p) in row.iter_mut().zip(prior.at(loc)) {
                *w += p.ln();
            }
            softmax_in_place(row);
        }
        post.q_indices[c] = CategoricalGrid::new(prior.height(), prior.width(), size, logits)
            .expect("normalized rows");
    }
}

fn update_transforms(table: &[f64], model: &TmpimModel, post: &mut TmpimPosterior) {
    for c in 0..model.num_classes() {
        let mut logits = scores_from_table(table, &post.q_indices[c], &model.tset);
        for (w, &p) in logits.iter_mut().zip(model.tset.prior()) {
            *w += p.ln();
        }
        softmax_in_place(&mut logits);
        post.q_transform[c] = logits;
    }
}

fn update_classes(model: &TmpimModel, post: &mut TmpimPosterior, terms: &ClassTerms) {
    let mut logits: Vec<f64> = model
        .class_prior
        .iter()
        .zip(&terms.energy)
        .map(|(p, f)| p.ln() - f)
        .collect();
    softmax_in_place(&mut logits);
    post.q_class = logits;
}

/// Cold start: `q(S|c)` at the class prior, `q(T|c)` and `q(c)` at their
/// optima given that.
fn initial_posterior(table: &[f64], model: &TmpimModel) -> TmpimPosterior {
    let c = model.num_classes();
    let mut post = TmpimPosterior {
        q_class: model.class_prior.clone(),
        q_transform: vec![model.tset.prior().to_vec(); c],
        q_indices: model.class_pims.clone(),
    };
    update_transforms(table, model, &mut post);
    let terms = class_terms(table, model, &post);
    update_classes(model, &mut post, &terms);
    post
}

/// Coordinate-ascent sweeps (indices, transforms, classes) from `post`.
/// Returns the free energy after the last sweep.
fn refine(table: &[f64], model: &TmpimModel, post: &mut TmpimPosterior, cfg: &EmConfig) -> f64 {
    let mut energy = total_energy(model, post, &class_terms(table, model, post));
    for _ in 0..cfg.inner_max_iters {
        update_indices(table, model, post);
        update_transforms(table, model, post);
        let terms = class_terms(table, model, post);
        update_classes(model, post, &terms);
        let next = total_energy(model, post, &terms);
        let change = energy - next;
        energy = next;
        if change.abs() <= cfg.inner_tol * energy.abs().max(1.0) {
            break;
        }
    }
    energy
}

/// Variational E step for one signal from a cold start.
pub fn tmpim_e_step(
    grid: &SignalGrid,
    palette: &Palette,
    model: &TmpimModel,
    cfg: &EmConfig,
) -> Result<TmpimPosterior> {
    model.check_signal(grid, palette)?;
    let table = log_likelihood_table(grid, palette);
    let mut post = initial_posterior(&table, model);
    refine(&table, model, &mut post, cfg);
    Ok(post)
}

/// Argmax class per signal, ties to the lowest index.
pub fn cluster_assignments(posteriors: &[TmpimPosterior]) -> Vec<usize> {
    posteriors.iter().map(TmpimPosterior::class).collect()
}

/// Transform-aligned responsibilities in the observed frame, used for the
/// palette M step: `w_ij(s) = sum_c q(c) sum_T q(T|c) q(s_T(ij) | c)`.
pub fn aligned_responsibilities(model: &TmpimModel, post: &TmpimPosterior) -> Responsibilities {
    let first = &model.class_pims[0];
    let mut probs = vec![0.0; first.locations() * model.palette_size];
    for c in 0..model.num_classes() {
        forward_project_into(
            &post.q_indices[c],
            &post.q_transform[c],
            &model.tset,
            post.q_class[c],
            &mut probs,
        );
    }
    CategoricalGrid::new(first.height(), first.width(), model.palette_size, probs)
        .expect("aligned responsibilities")
}

fn m_step_model(model: &TmpimModel, posteriors: &[TmpimPosterior], cfg: &EmConfig) -> TmpimModel {
    let c_count = model.num_classes();
    let first = &model.class_pims[0];
    let mut class_prior = vec![0.0; c_count];
    let mut class_pims = Vec::with_capacity(c_count);
    for (c, mass) in class_prior.iter_mut().enumerate() {
        let mut acc = vec![0.0; first.locations() * model.palette_size];
        for post in posteriors {
            let w = post.q_class[c];
            *mass += w;
            if w == 0.0 {
                continue;
            }
            for (a, &q) in acc.iter_mut().zip(post.q_indices[c].probs()) {
                *a += w * q;
            }
        }
        for row in acc.chunks_mut(model.palette_size) {
            project_floored(row, cfg.prior_floor);
        }
        class_pims.push(
            CategoricalGrid::new(first.height(), first.width(), model.palette_size, acc)
                .expect("class index prior"),
        );
    }
    project_floored(&mut class_prior, cfg.prior_floor);
    TmpimModel {
        class_prior,
        class_pims,
        tset: model.tset.clone(),
        palette_size: model.palette_size,
    }
}

/// Learns a TMPIM with the default seeded initialization.
pub fn fit_tmpim(
    grids: &[SignalGrid],
    classes: usize,
    size: usize,
    tset: TransformSet,
    cfg: &EmConfig,
) -> Result<TmpimFit> {
    let init = initialize_tmpim(grids, classes, size, tset, cfg)?;
    fit_tmpim_from(grids, init, cfg)
}

/// EM from an explicit start: (b) variational posterior per signal,
/// (c) class priors and class index maps, (a) per-signal palettes.
pub fn fit_tmpim_from(grids: &[SignalGrid], init: TmpimInit, cfg: &EmConfig) -> Result<TmpimFit> {
    cfg.validate()?;
    let TmpimInit {
        mut model,
        mut palettes,
    } = init;
    model.validate()?;
    let size = model.palette_size;
    validate_collection(grids, size)?;
    if palettes.len() != grids.len() {
        return Err(PimError::InvalidInput(format!(
            "{} initial palettes for {} signals",
            palettes.len(),
            grids.len()
        )));
    }
    if grids.len() < model.num_classes() {
        return Err(PimError::Config(format!(
            "{} signals cannot populate {} classes",
            grids.len(),
            model.num_classes()
        )));
    }
    for (g, p) in grids.iter().zip(&palettes) {
        model.check_signal(g, p)?;
    }

    let e_phase = |model: &TmpimModel,
                   palettes: &[Palette],
                   previous: Option<&[TmpimPosterior]>|
     -> (Vec<TmpimPosterior>, f64) {
        let out: Vec<(TmpimPosterior, f64)> = (0..grids.len())
            .into_par_iter()
            .map(|t| {
                let table = log_likelihood_table(&grids[t], &palettes[t]);
                let mut post = match previous {
                    Some(prev) => prev[t].clone(),
                    None => initial_posterior(&table, model),
                };
                let f = refine(&table, model, &mut post, cfg);
                (post, f)
            })
            .collect();
        let total = out.iter().map(|(_, f)| f).sum();
        (out.into_iter().map(|(p, _)| p).collect(), total)
    };

    let mut trace: Vec<f64> = Vec::new();
    let mut posteriors: Option<Vec<TmpimPosterior>> = None;
    let mut fallbacks: Vec<Option<Palette>> = vec![None; grids.len()];
    loop {
        let (mut next, mut energy) = e_phase(&model, &palettes, posteriors.as_deref());
        if let Some(&previous) = trace.last() {
            if energy > previous && fallbacks.iter().any(Option::is_some) {
                for (pal, fb) in palettes.iter_mut().zip(fallbacks.iter_mut()) {
                    if let Some(fb) = fb.take() {
                        *pal = fb;
                    }
                }
                (next, energy) = e_phase(&model, &palettes, posteriors.as_deref());
            }
        }
        fallbacks.iter_mut().for_each(|f| *f = None);
        let done = trace.last().is_some_and(|&p| cfg.converged(p, energy));
        trace.push(energy);
        if done || trace.len() >= cfg.max_iters {
            return Ok(TmpimFit {
                model,
                palettes,
                posteriors: next,
                final_free_energy: energy,
                trace,
            });
        }
        let updates: Vec<_> = (0..grids.len())
            .into_par_iter()
            .map(|t| {
                let w = aligned_responsibilities(&model, &next[t]);
                weighted_palette(
                    &grids[t],
                    size,
                    |loc, s| w.at(loc)[s],
                    Some(&palettes[t]),
                    cfg,
                )
            })
            .collect();
        for ((pal, fb), update) in palettes.iter_mut().zip(fallbacks.iter_mut()).zip(updates) {
            *pal = update.palette;
            *fb = update.fallback;
        }
        model = m_step_model(&model, &next, cfg);
        posteriors = Some(next);
    }
}

/// All shifts `a - b` with `a, b` in the family, deduplicated, identity first.
fn difference_set(tset: &TransformSet) -> Vec<Transform> {
    let (h, w) = (tset.height(), tset.width());
    let mut out = vec![Transform::IDENTITY];
    for &a in tset.transforms() {
        for &b in tset.transforms() {
            let d = a.then(b.inverse(h, w), h, w);
            if !out.contains(&d) {
                out.push(d);
            }
        }
    }
    out
}

/// Offset `o` maximizing the number of members `r` with `r - o` in the
/// family; ties go to the smallest total squared shift, then to search order.
fn recentering_offset(
    members: &[Transform],
    search: &[Transform],
    tset: &TransformSet,
) -> Transform {
    let (h, w) = (tset.height(), tset.width());
    let mut best = (Transform::IDENTITY, 0usize, i64::MAX);
    for &o in search {
        let inv = o.inverse(h, w);
        let mut inside = 0;
        let mut spread = 0;
        for &r in members {
            let t = r.then(inv, h, w);
            if tset.position(t).is_some() {
                inside += 1;
            }
            let (dy, dx) = t.signed(h, w);
            spread += dy * dy + dx * dx;
        }
        if inside > best.1 || (inside == best.1 && spread < best.2) {
            best = (o, inside, spread);
        }
    }
    best.0
}

/// Weight on the seed signal's own labels when turning it into a class map.
const SEED_CONFIDENCE: f64 = 0.9;
/// Palette-inference iterations used while scoring seeds.
const SEED_PALETTE_ITERS: usize = 5;

/// Seeded initialization.
///
/// Class index maps are grown farthest-first: the first class is a softened
/// copy of the k-means label map of a randomly chosen signal; each further
/// class is seeded from the signal that the existing classes explain worst,
/// where "explain" means the best free energy over classes and shifts after
/// re-inferring the signal's palette against the shifted class map. Seeds sit
/// in the frame of one signal, so matching searches the difference set
/// `{a - b}` of the transform family, and each class map is then re-centered
/// so that as many of its members as possible fall inside the family. Every
/// signal's starting palette comes from its best (class, shift) match, so its
/// entry labels agree with the class maps. Class maps receive
/// `cfg.class_jitter` uniform noise.
pub fn initialize_tmpim(
    grids: &[SignalGrid],
    classes: usize,
    size: usize,
    tset: TransformSet,
    cfg: &EmConfig,
) -> Result<TmpimInit> {
    cfg.validate()?;
    validate_collection(grids, size)?;
    if classes == 0 {
        return Err(PimError::Config(
            "number of classes must be at least 1".into(),
        ));
    }
    if grids.len() < classes {
        return Err(PimError::Config(format!(
            "{} signals cannot populate {classes} classes",
            grids.len()
        )));
    }
    let (h, w) = (grids[0].height(), grids[0].width());
    tset.ensure_dims(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels: Vec<Vec<usize>> = grids
        .iter()
        .map(|g| kmeans_palette(g, size, cfg, &mut rng).1)
        .collect();
    let seed_map = |labels: &[usize], rng: &mut ChaCha8Rng| -> IndexPrior {
        let mut map = CategoricalGrid::one_hot(h, w, size, labels);
        for loc in 0..map.locations() {
            let row = map.at_mut(loc);
            for p in row.iter_mut() {
                *p = SEED_CONFIDENCE * *p
                    + (1.0 - SEED_CONFIDENCE) / size as f64
                    + cfg.class_jitter * rng.random::<f64>();
            }
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|p| *p /= z);
        }
        map
    };

    let seed_cfg = EmConfig {
        max_iters: SEED_PALETTE_ITERS,
        ..cfg.clone()
    };
    let search = difference_set(&tset);
    // best (energy, class, relative transform, palette) per signal
    let score_against =
        |map: &IndexPrior, class: usize| -> Result<Vec<(f64, usize, Transform, Palette)>> {
            grids
                .par_iter()
                .map(|g| {
                    let mut best: Option<(f64, usize, Transform, Palette)> = None;
                    for &t in &search {
                        let fit = infer_palette(g, &apply_transform(map, t), &seed_cfg)?;
                        if best.as_ref().is_none_or(|b| fit.free_energy < b.0) {
                            best = Some((fit.free_energy, class, t, fit.palette));
                        }
                    }
                    Ok(best.expect("non-empty transform set"))
                })
                .collect()
        };

    let first = rng.random_range(0..grids.len());
    let mut class_pims = vec![seed_map(&labels[first], &mut rng)];
    let mut best = score_against(&class_pims[0], 0)?;
    while class_pims.len() < classes {
        let worst = (0..grids.len())
            .max_by(|&a, &b| best[a].0.total_cmp(&best[b].0).then(b.cmp(&a)))
            .expect("non-empty");
        let map = seed_map(&labels[worst], &mut rng);
        let scores = score_against(&map, class_pims.len())?;
        for (b, s) in best.iter_mut().zip(scores) {
            if s.0 < b.0 {
                *b = s;
            }
        }
        class_pims.push(map);
    }
    for (c, map) in class_pims.iter_mut().enumerate() {
        let members: Vec<Transform> = best.iter().filter(|b| b.1 == c).map(|b| b.2).collect();
        let offset = recentering_offset(&members, &search, &tset);
        *map = apply_transform(map, offset);
    }
    let palettes = best.into_iter().map(|b| b.3).collect();
    Ok(TmpimInit {
        model: TmpimModel {
            class_prior: vec![1.0 / classes as f64; classes],
            class_pims,
            tset,
            palette_size: size,
        },
        palettes,
    })
}
