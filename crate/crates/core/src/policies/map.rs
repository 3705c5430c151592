//! Dose selection on the MAP-individualized model.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::inference::map::{MapEstimate, MapProblem};
use crate::pkpd::model::IndividualParameters;
use crate::pkpd::simulate::{CycleSpec, Simulator};
use crate::pkpd::system::N_STATES;
use crate::policies::grid::DoseGrid;
use crate::policies::reward::RewardSpec;
use crate::policies::search::minimize_dose;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapMode {
    /// Squared distance of the nadir to the target.
    Target,
    /// Piecewise-linear utility of the nadir.
    Utility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDose {
    pub dose_mg: f64,
    pub predicted_nadir: f64,
    /// Minimized objective (negated utility in utility mode).
    pub objective: f64,
    pub grid_doses_mg: Vec<f64>,
    pub grid_objective: Vec<f64>,
}

/// Patient state and next-occasion parameters implied by a MAP estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct MapPredictor {
    pub params: IndividualParameters,
    pub state: [f64; N_STATES],
    pub start: f64,
    pub occasion: usize,
}

impl MapPredictor {
    /// Future IOV is set to zero.
    pub fn new(problem: &MapProblem<'_>, estimate: &MapEstimate, cycle_start: f64) -> Result<Self> {
        let occasion = (cycle_start / problem.cycle_length).round() as usize;
        let mut params = estimate.params.clone();
        params.kappa.truncate(occasion);
        let state = problem.state_at(&params, cycle_start)?;
        Ok(Self {
            params,
            state,
            start: cycle_start,
            occasion,
        })
    }

    pub fn nadir(&self, sim: &Simulator<f64>, problem: &MapProblem<'_>, dose_mg: f64) -> Result<f64> {
        let occ = self.params.occasion(self.occasion);
        let mut spec = CycleSpec::new(self.start, dose_mg);
        spec.length = problem.cycle_length;
        Ok(sim.run_cycle(problem.model, &occ, self.state, &spec, &[], false)?.nadir)
    }
}

pub fn map_guided_dose(
    problem: &MapProblem<'_>,
    estimate: &MapEstimate,
    cycle_start: f64,
    mode: MapMode,
    spec: &RewardSpec,
    grid: &DoseGrid,
    bsa: f64,
) -> Result<MapDose> {
    let predictor = MapPredictor::new(problem, estimate, cycle_start)?;
    let sim = Simulator::<f64>::new(problem.config.solver);
    let objective = |d: f64| -> Result<f64> {
        let n = predictor.nadir(&sim, problem, d)?;
        Ok(match mode {
            MapMode::Target => spec.target_loss(n),
            MapMode::Utility => -spec.utility(n),
        })
    };
    let doses = grid.levels_mg(bsa);
    let r = minimize_dose(objective, &doses, 0.01)?;
    Ok(MapDose {
        dose_mg: r.dose_mg,
        predicted_nadir: predictor.nadir(&sim, problem, r.dose_mg)?,
        objective: r.objective,
        grid_doses_mg: doses,
        grid_objective: r.grid_objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::map::{MapConfig, MapParameter};
    use crate::pkpd::model::{iiv, PatientCovariates, PopulationModel};

    fn problem_parts() -> (PopulationModel, PatientCovariates, MapConfig) {
        (PopulationModel::default(), PatientCovariates::reference(), MapConfig::default())
    }

    fn estimate_with_slope(p: &MapProblem<'_>, eta_slope: f64) -> MapEstimate {
        let free = vec![MapParameter::Eta(iiv::SLOPE)];
        MapEstimate {
            params: p.parameters(&free, &[eta_slope]).unwrap(),
            free,
            values: vec![eta_slope],
            objective: 0.0,
            evaluations: 0,
            converged: true,
        }
    }

    #[test]
    fn target_mode_matches_dense_grid() {
        let (m, c, cfg) = problem_parts();
        let p = MapProblem::new(&m, &c, &[], &[], &cfg);
        let e = estimate_with_slope(&p, 0.0);
        let spec = RewardSpec::default();
        let grid = DoseGrid::default();
        let r = map_guided_dose(&p, &e, 0.0, MapMode::Target, &spec, &grid, c.bsa).unwrap();
        let pred = MapPredictor::new(&p, &e, 0.0).unwrap();
        let sim = Simulator::<f64>::new(cfg.solver);
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=380 {
            let d = (60.0 + 0.5 * k as f64) * c.bsa;
            let v = spec.target_loss(pred.nadir(&sim, &p, d).unwrap());
            if v < best.0 {
                best = (v, d);
            }
        }
        assert!((r.dose_mg - best.1).abs() <= 0.5 * c.bsa, "{} vs {}", r.dose_mg, best.1);
        assert!((r.predicted_nadir - 1.0).abs() < 0.01);
    }

    #[test]
    fn higher_slope_gets_lower_dose() {
        let (m, c, cfg) = problem_parts();
        let p = MapProblem::new(&m, &c, &[], &[], &cfg);
        let spec = RewardSpec::default();
        let grid = DoseGrid::default();
        let typical = map_guided_dose(&p, &estimate_with_slope(&p, 0.0), 0.0, MapMode::Target, &spec, &grid, c.bsa)
            .unwrap();
        let sensitive = map_guided_dose(&p, &estimate_with_slope(&p, 1.0), 0.0, MapMode::Target, &spec, &grid, c.bsa)
            .unwrap();
        assert!(sensitive.dose_mg < typical.dose_mg);
    }

    #[test]
    fn utility_mode_returns_lowest_plateau_dose() {
        let (m, c, cfg) = problem_parts();
        let p = MapProblem::new(&m, &c, &[], &[], &cfg);
        let e = estimate_with_slope(&p, 0.0);
        let spec = RewardSpec::default();
        let r = map_guided_dose(&p, &e, 0.0, MapMode::Utility, &spec, &DoseGrid::default(), c.bsa).unwrap();
        assert_eq!(r.objective, -1.0);
        assert!((r.predicted_nadir - 2.0).abs() < 0.01, "{}", r.predicted_nadir);
    }
}
