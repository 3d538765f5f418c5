//! Random instances and independent oracles shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use pim_core::cluster::best_assignment;
use pim_core::{CategoricalGrid, Palette, PaletteEntry, SignalGrid};

pub fn random_palette(rng: &mut ChaCha8Rng, size: usize, dim: usize) -> Palette {
    Palette::new(
        (0..size)
            .map(|_| {
                let mean = (0..dim).map(|_| rng.random_range(0.0..1.0)).collect();
                let var = (0..dim).map(|_| rng.random_range(0.005..0.2)).collect();
                PaletteEntry::new(mean, var).unwrap()
            })
            .collect(),
    )
    .unwrap()
}

/// Probability vector with every entry bounded away from zero.
pub fn random_stochastic(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = row.iter().sum();
    row.iter().map(|p| p / total).collect()
}

pub fn random_categorical(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    size: usize,
) -> CategoricalGrid {
    let probs = (0..h * w)
        .flat_map(|_| random_stochastic(rng, size))
        .collect();
    CategoricalGrid::new(h, w, size, probs).unwrap()
}

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, dim: usize, scale: f64) -> SignalGrid {
    SignalGrid::new(
        h,
        w,
        dim,
        (0..h * w * dim)
            .map(|_| rng.random_range(0.0..scale))
            .collect(),
    )
    .unwrap()
}

/// Diagonal Gaussian log-density written out term by term.
pub fn log_normal(x: &[f64], e: &PaletteEntry) -> f64 {
    x.iter()
        .zip(&e.mean)
        .zip(&e.variance)
        .map(|((x, m), v)| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v))
        .sum()
}

/// Agreement between two labelings under the best one-to-one relabeling.
pub fn permuted_accuracy(found: &[usize], truth: &[usize], k: usize) -> f64 {
    let mut score = vec![vec![0.0; k]; k];
    for (&t, &f) in truth.iter().zip(found) {
        score[t][f] += 1.0;
    }
    let perm = best_assignment(&score);
    perm.iter()
        .enumerate()
        .map(|(t, &f)| score[t][f])
        .sum::<f64>()
        / truth.len() as f64
}

/// Fraction of positions where two label maps agree exactly.
pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64
}

pub fn is_monotone(trace: &[f64], slack: f64) -> bool {
    trace.windows(2).all(|w| w[1] <= w[0] + slack)
}

/// State posteriors, pairwise posteriors and log normalizer.
pub type ChainPosterior = (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, f64);

/// `(gamma, xi, log Z)` by summing over every state path.
pub fn enumerate_paths(emit: &[Vec<f64>], initial: &[f64], trans: &[Vec<f64>]) -> ChainPosterior {
    let (frames, k) = (emit.len(), initial.len());
    let mut z = 0.0;
    let mut gamma = vec![vec![0.0; k]; frames];
    let mut xi = vec![vec![vec![0.0; k]; k]; frames.saturating_sub(1)];
    for code in 0..k.pow(frames as u32) {
        let path: Vec<usize> = (0..frames).map(|j| code / k.pow(j as u32) % k).collect();
        let mut p = initial[path[0]] * emit[0][path[0]].exp();
        for j in 1..frames {
            p *= trans[path[j - 1]][path[j]] * emit[j][path[j]].exp();
        }
        z += p;
        for j in 0..frames {
            gamma[j][path[j]] += p;
            if j + 1 < frames {
                xi[j][path[j]][path[j + 1]] += p;
            }
        }
    }
    gamma.iter_mut().flatten().for_each(|g| *g /= z);
    xi.iter_mut().flatten().flatten().for_each(|x| *x /= z);
    (gamma, xi, z.ln())
}
