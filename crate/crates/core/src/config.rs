use serde::{Deserialize, Serialize};

use crate::error::{PimError, Result};

/// Settings shared by every EM fitter.
///
/// Defaults: `tol = 1e-6` relative free-energy change, `max_iters = 200`,
/// five inner coordinate-ascent sweeps with `inner_tol = 1e-7`, variance floor
/// `1e-4` (in [0, 1]-normalized units), index-prior floor `1e-6`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub inner_max_iters: usize,
    pub inner_tol: f64,
    pub seed: u64,
    pub variance_floor: f64,
    pub prior_floor: f64,
    /// Floor for HMM initial and transition probabilities.
    pub transition_floor: f64,
    /// Starvation threshold per location: an entry whose total responsibility
    /// is below `mass_epsilon * locations` is re-seeded.
    pub mass_epsilon: f64,
    pub kmeans_iters: usize,
    /// Uniform jitter added to the initial index prior.
    pub prior_jitter: f64,
    /// Jitter used when splitting class index maps at initialization.
    pub class_jitter: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iters: 200,
            inner_max_iters: 5,
            inner_tol: 1e-7,
            seed: 0,
            variance_floor: 1e-4,
            prior_floor: 1e-6,
            transition_floor: 1e-8,
            mass_epsilon: 1e-6,
            kmeans_iters: 10,
            prior_jitter: 0.01,
            class_jitter: 0.05,
        }
    }
}

impl EmConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(PimError::Config(format!(
                    "{name} must be positive, got {v}"
                )))
            }
        };
        positive("tol", self.tol)?;
        positive("inner_tol", self.inner_tol)?;
        positive("variance_floor", self.variance_floor)?;
        if self.max_iters == 0 || self.inner_max_iters == 0 {
            return Err(PimError::Config(
                "max_iters and inner_max_iters must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("prior_floor", self.prior_floor),
            ("transition_floor", self.transition_floor),
            ("mass_epsilon", self.mass_epsilon),
            ("prior_jitter", self.prior_jitter),
            ("class_jitter", self.class_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(PimError::Config(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Relative free-energy decrease test used by all outer loops.
    pub(crate) fn converged(&self, previous: f64, current: f64) -> bool {
        (previous - current) <= self.tol * current.abs().max(f64::MIN_POSITIVE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        EmConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_non_positive_tolerance() {
        let cfg = EmConfig {
            tol: 0.0,
            ..EmConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(PimError::Config(_))));
    }

    #[test]
    fn rejects_zero_iterations() {
        let cfg = EmConfig {
            max_iters: 0,
            ..EmConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
