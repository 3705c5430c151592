//! Measurement model: log-normal residual error on neutrophil and drug observables.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pkpd::model::PopulationModel;
use crate::pkpd::simulate::{Observable, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// h since the first dose.
    pub time: f64,
    /// 10⁹ cells/L for neutrophils, µM for drug.
    pub value: f64,
    pub kind: Observable,
}

impl PopulationModel {
    /// Residual standard deviation on log scale for an observable.
    pub fn residual_sd(&self, kind: Observable) -> f64 {
        match kind {
            Observable::Neutrophils => self.sigma_pd(),
            Observable::Drug => self.sigma_pk(),
        }
    }
}

/// Draws `h·exp(σ·ξ)` with ξ ~ N(0, 1).
pub fn noisy<R: Rng + ?Sized>(h: f64, sigma: f64, rng: &mut R) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Domain(format!("cannot observe non-positive value {h}")));
    }
    let xi: f64 = rng.sample(StandardNormal);
    Ok(h * (sigma * xi).exp())
}

/// Samples an observation from a simulated trajectory at a grid time.
pub fn observe<R: Rng + ?Sized>(
    traj: &Trajectory<f64>,
    t: f64,
    kind: Observable,
    model: &PopulationModel,
    rng: &mut R,
) -> Result<Observation> {
    let h = traj.value_at(t, kind)?;
    Ok(Observation {
        time: t,
        value: noisy(h, model.residual_sd(kind), rng)?,
        kind,
    })
}

/// Negative log-likelihood of `y` given prediction `h`, dropping the 2π constant.
pub fn neg_log_lik(y: f64, h: f64, sigma: f64) -> Result<f64> {
    if !(h > 0.0) || !(y > 0.0) {
        return Err(Error::Domain(format!("log of non-positive value (y = {y}, h = {h})")));
    }
    let r = y.ln() - h.ln();
    Ok(r * r / (2.0 * sigma * sigma) + sigma.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_sigma_is_noise_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(noisy(2.5, 0.0, &mut rng).unwrap(), 2.5);
    }

    #[test]
    fn non_positive_prediction_is_a_domain_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(noisy(0.0, 0.1, &mut rng), Err(Error::Domain(_))));
        assert!(neg_log_lik(1.0, -1.0, 0.1).is_err());
    }

    #[test]
    fn log_mean_matches_truth() {
        let sigma = 0.2652_f64.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| noisy(2.0, sigma, &mut rng).unwrap().ln())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 2.0_f64.ln()).abs() < 3.0 * sigma / (n as f64).sqrt());
    }

    #[test]
    fn seeded_draws_repeat() {
        let a = noisy(2.0, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = noisy(2.0, 0.5, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
