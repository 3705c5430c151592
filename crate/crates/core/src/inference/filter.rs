//! Sequential importance resampling over a generic state-space model.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, SimRng};

/// Contract between the filter and a concrete model.
pub trait StateSpaceModel: Sync {
    type Member: Clone + Send + Sync;
    type Observation: Sync;

    /// Advances a member to the time of `obs`. `rng` is a private stream for
    /// this member and update, so members can be processed in any order.
    fn propagate(&self, member: &mut Self::Member, obs: &Self::Observation, rng: &mut SimRng) -> Result<()>;

    /// `log p(obs | member)`; `-∞` for impossible observations.
    fn log_likelihood(&self, member: &Self::Member, obs: &Self::Observation) -> f64;

    /// Called after resampling with the pre-resampling members and weights.
    fn rejuvenate<R: Rng + ?Sized>(
        &self,
        _members: &mut [Self::Member],
        _previous: &[Self::Member],
        _previous_weights: &[f64],
        _rng: &mut R,
    ) {
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub members: usize,
    /// Resample when ESS drops below this fraction of the ensemble size.
    pub resample_fraction: f64,
    /// Bandwidth h of the rejuvenation jitter N(0, h²·Σ̂).
    pub jitter: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            members: 100,
            resample_fraction: 0.5,
            jitter: 0.1,
        }
    }
}

/// Weighted particle set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble<P> {
    pub members: Vec<P>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateSummary {
    pub ess: f64,
    pub resampled: bool,
    /// log of the mean likelihood under the prior weights.
    pub log_evidence: f64,
}

impl<P: Clone> Ensemble<P> {
    pub fn uniform(members: Vec<P>) -> Self {
        let n = members.len();
        Self {
            members,
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Effective sample size 1/Σw².
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    /// Multiplies weights by `exp(log_lik)` and renormalizes. Leaves the
    /// weights untouched and fails if every product vanishes.
    pub fn reweight(&mut self, log_lik: &[f64]) -> Result<f64> {
        if log_lik.len() != self.len() {
            return Err(Error::Dimension {
                what: "likelihoods",
                expected: self.len(),
                got: log_lik.len(),
            });
        }
        let max = log_lik
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(l, _)| *l)
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateUpdate);
        }
        let new: Vec<f64> = log_lik
            .iter()
            .zip(&self.weights)
            .map(|(l, w)| w * (l - max).exp())
            .collect();
        let total: f64 = new.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateUpdate);
        }
        self.weights = new.into_iter().map(|w| w / total).collect();
        Ok(max + total.ln())
    }

    /// Systematic resampling with offset `u ∈ [0, 1)`; weights become uniform.
    pub fn resample_systematic(&mut self, u: f64) {
        let n = self.len();
        let idx = systematic_indices(&self.weights, n, u);
        self.members = idx.iter().map(|&i| self.members[i].clone()).collect();
        self.weights = vec![1.0 / n as f64; n];
    }
}

/// Indices drawn by systematic resampling: one uniform offset, n strata.
pub fn systematic_indices(weights: &[f64], n: usize, u: f64) -> Vec<usize> {
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut i = 0;
    for k in 0..n {
        let target = (k as f64 + u) / n as f64;
        while target > cum && i + 1 < weights.len() {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Propagates every member to `obs`, reweights by the likelihood and
/// resamples + rejuvenates when the ESS falls below the threshold.
pub fn assimilate<M: StateSpaceModel, R: Rng + ?Sized>(
    model: &M,
    ensemble: &mut Ensemble<M::Member>,
    obs: &M::Observation,
    config: &FilterConfig,
    rng: &mut R,
) -> Result<UpdateSummary> {
    if ensemble.is_empty() {
        return Err(Error::InvalidInput("empty ensemble".into()));
    }
    let step_seed: u64 = rng.random();
    ensemble
        .members
        .par_iter_mut()
        .enumerate()
        .try_for_each(|(m, member)| {
            let mut r = substream(step_seed, &[m as u64]);
            model.propagate(member, obs, &mut r)
        })?;
    let log_lik: Vec<f64> = ensemble
        .members
        .par_iter()
        .map(|m| model.log_likelihood(m, obs))
        .collect();
    let log_evidence = ensemble.reweight(&log_lik)?;
    let ess = ensemble.ess();
    let threshold = config.resample_fraction * ensemble.len() as f64;
    let mut resampled = false;
    if ess < threshold {
        let previous = ensemble.members.clone();
        let previous_weights = ensemble.weights.clone();
        ensemble.resample_systematic(rng.random::<f64>());
        model.rejuvenate(&mut ensemble.members, &previous, &previous_weights, rng);
        resampled = true;
    }
    Ok(UpdateSummary {
        ess,
        resampled,
        log_evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    /// x_k = a·x_{k−1} + N(0, q), y_k = x_k + N(0, r).
    struct LinearGaussian {
        a: f64,
        q: f64,
        r: f64,
    }

    impl StateSpaceModel for LinearGaussian {
        type Member = f64;
        type Observation = f64;

        fn propagate(&self, x: &mut f64, _obs: &f64, rng: &mut SimRng) -> Result<()> {
            *x = self.a * *x + Normal::new(0.0, self.q.sqrt()).unwrap().sample(rng);
            Ok(())
        }

        fn log_likelihood(&self, x: &f64, y: &f64) -> f64 {
            -(y - x).powi(2) / (2.0 * self.r)
        }
    }

    fn kalman(m0: f64, p0: f64, model: &LinearGaussian, ys: &[f64]) -> (f64, f64) {
        let (mut m, mut p) = (m0, p0);
        for y in ys {
            m *= model.a;
            p = model.a * model.a * p + model.q;
            let k = p / (p + model.r);
            m += k * (y - m);
            p *= 1.0 - k;
        }
        (m, p)
    }

    #[test]
    fn equal_likelihoods_keep_weights() {
        let mut e = Ensemble {
            members: vec![1, 2, 3],
            weights: vec![0.2, 0.3, 0.5],
        };
        e.reweight(&[-1.5, -1.5, -1.5]).unwrap();
        for (w, x) in e.weights.iter().zip([0.2, 0.3, 0.5]) {
            assert!((w - x).abs() < 1e-15);
        }
    }

    #[test]
    fn two_particle_update() {
        let mut e = Ensemble::uniform(vec![0, 1]);
        e.reweight(&[0.2f64.ln(), 0.6f64.ln()]).unwrap();
        assert!((e.weights[0] - 0.25).abs() < 1e-15);
        assert!((e.weights[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn vanishing_likelihood_is_degenerate() {
        let mut e = Ensemble::uniform(vec![0, 1]);
        let before = e.weights.clone();
        assert!(matches!(
            e.reweight(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            Err(Error::DegenerateUpdate)
        ));
        assert_eq!(e.weights, before);
    }

    #[test]
    fn systematic_resampling_counts() {
        let idx = systematic_indices(&[0.5, 0.25, 0.25], 4, 0.5);
        assert_eq!(idx, vec![0, 0, 1, 2]);
        let idx = systematic_indices(&[0.0, 1.0, 0.0], 5, 0.3);
        assert_eq!(idx, vec![1; 5]);
    }

    #[test]
    fn matches_kalman_filter_within_monte_carlo_error() {
        let model = LinearGaussian {
            a: 0.9,
            q: 0.5,
            r: 0.8,
        };
        let ys = [0.7, 1.4, 0.2, -0.5, 1.1];
        let (m0, p0) = (0.0, 2.0);
        let (km, kp) = kalman(m0, p0, &model, &ys);
        let mut rng = substream(11, &[]);
        let prior = Normal::new(m0, p0.sqrt()).unwrap();
        let n = 10_000;
        let mut e = Ensemble::uniform((0..n).map(|_| prior.sample(&mut rng)).collect());
        let cfg = FilterConfig {
            members: n,
            ..FilterConfig::default()
        };
        for y in &ys {
            assimilate(&model, &mut e, y, &cfg, &mut rng).unwrap();
        }
        let mean: f64 = e.members.iter().zip(&e.weights).map(|(x, w)| x * w).sum();
        let se = (kp / e.ess()).sqrt();
        assert!((mean - km).abs() < 3.0 * se, "pf {mean} kalman {km} se {se}");
        let s = (e.weights.iter().sum::<f64>() - 1.0).abs();
        assert!(s < 1e-12);
    }
}
