//! Initialization helpers: k-means over measurement vectors and a square
//! assignment solver used to line up palette labels across signals.

use rand::Rng;

use crate::grid::SignalGrid;

/// Output of [`kmeans`].
#[derive(Debug, Clone)]
pub struct KMeans {
    /// `k` centers of dimension `dim`.
    pub centers: Vec<Vec<f64>>,
    /// Cluster label per location.
    pub labels: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means on the measurement vectors of `grid`, seeded with k-means++.
pub fn kmeans<R: Rng>(grid: &SignalGrid, k: usize, iters: usize, rng: &mut R) -> KMeans {
    let n = grid.locations();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(grid.at(rng.random_range(0..n)).to_vec());
    let mut nearest: Vec<f64> = (0..n).map(|l| sq_dist(grid.at(l), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (l, &d) in nearest.iter().enumerate() {
                if u < d {
                    chosen = l;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = grid.at(pick).to_vec();
        for (l, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(grid.at(l), &c));
        }
        centers.push(c);
    }

    let mut labels = vec![0usize; n];
    for _ in 0..iters.max(1) {
        for (l, label) in labels.iter_mut().enumerate() {
            let x = grid.at(l);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(x, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            *label = best;
        }
        let mut sums = vec![vec![0.0; grid.dim()]; k];
        let mut counts = vec![0usize; k];
        for (l, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, &x) in sums[c].iter_mut().zip(grid.at(l)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    KMeans { centers, labels }
}

/// Permutation `perm` maximizing `sum_a score[a][perm[a]]` over a square matrix
/// (Kuhn-Munkres with potentials, O(n^3)).
pub fn best_assignment(score: &[Vec<f64>]) -> Vec<usize> {
    let n = score.len();
    if n == 0 {
        return Vec::new();
    }
    // Minimize cost = -score; 1-based arrays with a virtual column 0.
    let cost = |a: usize, b: usize| -score[a - 1][b - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let cur = cost(r, col) - u[r] - v[col];
                if cur < minv[col] {
                    minv[col] = cur;
                    way[col] = col0;
                }
                if minv[col] < delta {
                    delta = minv[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for col in 1..=n {
        perm[owner[col] - 1] = col - 1;
    }
    perm
}
