//! Maximum a-posteriori estimation of individual random effects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::SolverOptions;
use crate::optimize::{nelder_mead, NelderMeadOptions};
use crate::pkpd::model::{iiv, IndividualParameters, PatientCovariates, PopulationModel, IIV_DIM, IOV_DIM};
use crate::pkpd::observe::{neg_log_lik, Observation};
use crate::pkpd::simulate::{Dose, DoseRegimen, Simulator, DEFAULT_CYCLE_LENGTH};
use crate::pkpd::system::N_STATES;

/// A random effect the estimator is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapParameter {
    /// IIV effect by index (see [`iiv`]).
    Eta(usize),
    EtaCirc0,
    Kappa { occasion: usize, index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub free: Vec<MapParameter>,
    /// Search box half-width in prior standard deviations.
    pub bound_sd: f64,
    pub ftol: f64,
    pub xtol: f64,
    pub max_evals: usize,
    pub solver: SolverOptions,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            free: vec![
                MapParameter::Eta(iiv::SLOPE),
                MapParameter::EtaCirc0,
                MapParameter::Eta(iiv::VM_EL),
            ],
            bound_sd: 4.0,
            ftol: 1e-7,
            xtol: 1e-4,
            max_evals: 600,
            solver: SolverOptions::planning(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapEstimate {
    pub params: IndividualParameters,
    pub free: Vec<MapParameter>,
    /// Values of the free effects, in the order of `free`.
    pub values: Vec<f64>,
    pub objective: f64,
    pub evaluations: usize,
    pub converged: bool,
}

/// Data and prior for one patient.
#[derive(Debug, Clone)]
pub struct MapProblem<'a> {
    pub model: &'a PopulationModel,
    pub covariates: &'a PatientCovariates,
    pub doses: &'a [Dose],
    pub observations: &'a [Observation],
    pub cycle_length: f64,
    pub config: &'a MapConfig,
}

impl<'a> MapProblem<'a> {
    pub fn new(
        model: &'a PopulationModel,
        covariates: &'a PatientCovariates,
        doses: &'a [Dose],
        observations: &'a [Observation],
        config: &'a MapConfig,
    ) -> Self {
        Self {
            model,
            covariates,
            doses,
            observations,
            cycle_length: DEFAULT_CYCLE_LENGTH,
            config,
        }
    }

    fn prior_variance(&self, p: MapParameter) -> f64 {
        match p {
            MapParameter::Eta(k) => self.model.iiv_variances()[k],
            MapParameter::EtaCirc0 => 1.0,
            MapParameter::Kappa { index, .. } => self.model.iov_variances()[index],
        }
    }

    fn occasions(&self) -> usize {
        let last_obs = self.observations.iter().map(|o| o.time).fold(0.0, f64::max);
        let last_dose = self.doses.last().map_or(0.0, |d| d.time);
        ((last_obs.max(last_dose) / self.cycle_length).floor() as usize + 1).max(1)
    }

    /// Free parameters with positive prior variance; the rest stay at zero.
    pub fn active(&self) -> Result<Vec<MapParameter>> {
        let mut out = Vec::new();
        for &p in &self.config.free {
            match p {
                MapParameter::Eta(k) if k >= IIV_DIM => {
                    return Err(Error::Dimension { what: "eta index", expected: IIV_DIM, got: k })
                }
                MapParameter::Kappa { index, .. } if index >= IOV_DIM => {
                    return Err(Error::Dimension { what: "kappa index", expected: IOV_DIM, got: index })
                }
                _ => {}
            }
            if self.prior_variance(p) > 0.0 && !out.contains(&p) {
                out.push(p);
            }
        }
        Ok(out)
    }

    /// Individual parameters with `values` placed on the `free` effects.
    pub fn parameters(&self, free: &[MapParameter], values: &[f64]) -> Result<IndividualParameters> {
        if free.len() != values.len() {
            return Err(Error::Dimension { what: "MAP values", expected: free.len(), got: values.len() });
        }
        let mut eta = [0.0; IIV_DIM];
        let mut kappa = vec![[0.0; IOV_DIM]; self.occasions()];
        let mut eta_circ0 = 0.0;
        for (&p, &v) in free.iter().zip(values) {
            match p {
                MapParameter::Eta(k) => eta[k] = v,
                MapParameter::EtaCirc0 => eta_circ0 = v,
                MapParameter::Kappa { occasion, index } => {
                    if occasion >= kappa.len() {
                        kappa.resize(occasion + 1, [0.0; IOV_DIM]);
                    }
                    kappa[occasion][index] = v;
                }
            }
        }
        IndividualParameters::new(self.model, self.covariates, eta, kappa, eta_circ0)
    }

    /// Σ_j [r_j²/(2σ²) + ln σ] + ½ Σ_k x_k²/ω_k² over the free effects.
    pub fn neg_log_posterior(&self, free: &[MapParameter], values: &[f64]) -> Result<f64> {
        let prior: f64 = free
            .iter()
            .zip(values)
            .map(|(&p, v)| 0.5 * v * v / self.prior_variance(p))
            .sum();
        if self.observations.is_empty() {
            return Ok(prior);
        }
        let params = self.parameters(free, values)?;
        let mut times: Vec<f64> = self.observations.iter().map(|o| o.time).collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        let regimen = DoseRegimen {
            doses: self.doses.to_vec(),
            cycle_length: self.cycle_length,
            cycles: self.occasions(),
        };
        let sim = Simulator::<f64>::new(self.config.solver);
        let traj = sim.simulate_with_restarts(self.model, &params, &regimen, &times, &times)?;
        let mut nll = 0.0;
        for o in self.observations {
            let h = traj.value_at(o.time, o.kind)?;
            nll += neg_log_lik(o.value, h, self.model.residual_sd(o.kind))?;
        }
        Ok(nll + prior)
    }

    /// Bounded Nelder–Mead from zero and, if given, from a warm start; the
    /// better of the two is returned. Without observations the prior mode
    /// (all effects zero) is returned directly.
    pub fn estimate(&self, warm_start: Option<&MapEstimate>) -> Result<MapEstimate> {
        let free = self.active()?;
        let zero = vec![0.0; free.len()];
        if self.observations.is_empty() || free.is_empty() {
            return Ok(MapEstimate {
                params: self.parameters(&free, &zero)?,
                objective: self.neg_log_posterior(&free, &zero)?,
                free,
                values: zero,
                evaluations: 1,
                converged: true,
            });
        }
        let sd: Vec<f64> = free.iter().map(|&p| self.prior_variance(p).sqrt()).collect();
        let bounds: Vec<(f64, f64)> = sd.iter().map(|s| (-self.config.bound_sd * s, self.config.bound_sd * s)).collect();
        let step: Vec<f64> = sd.iter().map(|s| 0.5 * s).collect();
        let opts = NelderMeadOptions {
            ftol: self.config.ftol,
            xtol: self.config.xtol,
            max_evals: self.config.max_evals,
        };
        let objective = |x: &[f64]| self.neg_log_posterior(&free, x).unwrap_or(f64::INFINITY);
        let mut starts = vec![zero];
        if let Some(w) = warm_start {
            let x: Vec<f64> = free
                .iter()
                .map(|p| w.free.iter().position(|q| q == p).map_or(0.0, |i| w.values[i]))
                .collect();
            if x.iter().any(|v| *v != 0.0) {
                starts.push(x);
            }
        }
        let mut best: Option<MapEstimate> = None;
        let mut evaluations = 0;
        for x0 in starts {
            let r = nelder_mead(objective, &x0, &step, &bounds, opts);
            evaluations += r.evaluations;
            if best.as_ref().is_none_or(|b| r.fx < b.objective) {
                best = Some(MapEstimate {
                    params: self.parameters(&free, &r.x)?,
                    free: free.clone(),
                    values: r.x,
                    objective: r.fx,
                    evaluations: 0,
                    converged: r.converged,
                });
            }
        }
        let mut best = best.expect("at least one start");
        if !best.objective.is_finite() {
            return Err(Error::Domain("MAP objective is not finite at any start".into()));
        }
        if !best.converged {
            log::warn!("MAP search hit its evaluation budget; returning best point found");
        }
        best.evaluations = evaluations;
        Ok(best)
    }

    /// State of the estimated patient at `t` under the given doses.
    pub fn state_at(&self, params: &IndividualParameters, t: f64) -> Result<[f64; N_STATES]> {
        let regimen = DoseRegimen {
            doses: self.doses.iter().copied().filter(|d| d.time < t).collect(),
            cycle_length: self.cycle_length,
            cycles: self.occasions(),
        };
        let sim = Simulator::<f64>::new(self.config.solver);
        let traj = sim.simulate(self.model, params, &regimen, &[t])?;
        Ok(traj.states[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pkpd::simulate::Observable;

    fn setup() -> (PopulationModel, PatientCovariates, Vec<Dose>) {
        let doses = vec![
            Dose { time: 0.0, amount_mg: 360.0, duration: 3.0 },
            Dose { time: 504.0, amount_mg: 300.0, duration: 3.0 },
        ];
        (PopulationModel::default(), PatientCovariates::reference(), doses)
    }

    #[test]
    fn no_data_returns_prior_mode() {
        let (m, c, d) = setup();
        let cfg = MapConfig::default();
        let p = MapProblem::new(&m, &c, &d, &[], &cfg);
        let e = p.estimate(None).unwrap();
        assert!(e.values.iter().all(|v| *v == 0.0));
        assert_eq!(e.params, IndividualParameters::typical(&m, &c, e.params.occasions()).unwrap());
        assert_eq!(e.objective, 0.0);
    }

    #[test]
    fn duplicated_datum_doubles_its_contribution() {
        let (m, c, d) = setup();
        let cfg = MapConfig::default();
        let o = Observation { time: 300.0, value: 1.1, kind: Observable::Neutrophils };
        let free = [MapParameter::Eta(iiv::SLOPE)];
        let x = [0.2];
        let prior = MapProblem::new(&m, &c, &d, &[], &cfg).neg_log_posterior(&free, &x).unwrap();
        let one = MapProblem::new(&m, &c, &d, &[o], &cfg).neg_log_posterior(&free, &x).unwrap();
        let two = MapProblem::new(&m, &c, &d, &[o, o], &cfg).neg_log_posterior(&free, &x).unwrap();
        assert!(((two - prior) - 2.0 * (one - prior)).abs() < 1e-12);
    }

    #[test]
    fn estimate_beats_zero_and_truth() {
        let (m, c, d) = setup();
        let cfg = MapConfig::default();
        let truth = MapProblem::new(&m, &c, &d, &[], &cfg);
        let free = cfg.free.clone();
        let x_true = [0.4, -0.5, 0.1];
        let params = truth.parameters(&free, &x_true).unwrap();
        let obs: Vec<Observation> = [240.0, 360.0, 744.0, 864.0]
            .iter()
            .map(|&t| {
                let y = crate::pkpd::system::idx::CIRC;
                Observation { time: t, value: truth.state_at(&params, t).unwrap()[y] * 1.05, kind: Observable::Neutrophils }
            })
            .collect();
        let p = MapProblem::new(&m, &c, &d, &obs, &cfg);
        let e = p.estimate(None).unwrap();
        let at_zero = p.neg_log_posterior(&free, &[0.0; 3]).unwrap();
        let at_truth = p.neg_log_posterior(&free, &x_true).unwrap();
        assert!(e.objective <= at_zero);
        assert!(e.objective <= at_truth + 1e-6, "{} vs {}", e.objective, at_truth);
        let warm = p.estimate(Some(&e)).unwrap();
        assert!(warm.objective <= e.objective);
    }
}
