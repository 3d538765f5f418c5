//! Small numeric helpers shared by the EM routines.

/// `log(sum(exp(xs)))` with max-subtraction. Returns `-inf` for an empty
/// slice or when every term is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Turns log-weights into probabilities in place and returns the log normalizer.
pub fn softmax_in_place(xs: &mut [f64]) -> f64 {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = (*x - lse).exp();
    }
    lse
}

/// `p * ln(p)` with `0 ln 0 = 0`.
#[inline]
pub fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `p * ln(p / r)` with `0 ln 0 = 0`; used for relative-entropy style sums.
#[inline]
pub fn xlog_ratio(p: f64, r: f64) -> f64 {
    if p > 0.0 {
        p * (p / r).ln()
    } else {
        0.0
    }
}

/// Maximizes `sum_s weights[s] * ln p[s]` over the simplex restricted to
/// `p[s] >= floor`, writing the result into `weights`.
///
/// Entries whose unconstrained share falls below the floor are pinned to it;
/// the rest keep their relative proportions. With `floor = 0` this is plain
/// normalization. All-zero weights give the uniform distribution.
pub fn project_floored(weights: &mut [f64], floor: f64) {
    let n = weights.len();
    if n == 0 {
        return;
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || floor * n as f64 >= 1.0 {
        weights.iter_mut().for_each(|w| *w = 1.0 / n as f64);
        return;
    }
    let mut pinned = vec![false; n];
    let mut pinned_count = 0usize;
    loop {
        let free_mass: f64 = weights
            .iter()
            .zip(&pinned)
            .filter(|(_, &p)| !p)
            .map(|(w, _)| *w)
            .sum();
        let scale = free_mass / (1.0 - pinned_count as f64 * floor);
        let mut changed = false;
        for (w, p) in weights.iter().zip(pinned.iter_mut()) {
            if !*p && *w < floor * scale {
                *p = true;
                pinned_count += 1;
                changed = true;
            }
        }
        if !changed {
            for (w, &p) in weights.iter_mut().zip(&pinned) {
                *w = if p { floor } else { *w / scale };
            }
            return;
        }
    }
}
