//! Virtual patients of one covariate class as a planning environment.

use serde::{Deserialize, Serialize};

use crate::cohort::{sample_effects, CohortConfig, CovariateClass, Grade, GradeScale};
use crate::error::Result;
use crate::ode::SolverOptions;
use crate::pkpd::model::{IndividualParameters, PopulationModel};
use crate::pkpd::simulate::{CycleSpec, Simulator, DEFAULT_CYCLE_LENGTH};
use crate::pkpd::system::{baseline_state, N_STATES};
use crate::planner::mcts::Environment;
use crate::policies::grid::DoseGrid;
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkPdEnvironment {
    pub model: PopulationModel,
    pub cohort: CohortConfig,
    pub class: CovariateClass,
    pub grid: DoseGrid,
    pub scale: GradeScale,
    pub solver: SolverOptions,
    pub cycle_length: f64,
}

impl PkPdEnvironment {
    pub fn new(model: PopulationModel, class: CovariateClass) -> Self {
        Self {
            model,
            cohort: CohortConfig::default(),
            class,
            grid: DoseGrid::default(),
            scale: GradeScale::default(),
            solver: SolverOptions::planning(),
            cycle_length: DEFAULT_CYCLE_LENGTH,
        }
    }
}

/// A freshly sampled patient being treated.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientEpisode {
    pub params: IndividualParameters,
    pub bsa: f64,
    pub state: [f64; N_STATES],
    pub cycle: usize,
    pub nadirs: Vec<f64>,
}

impl Environment for PkPdEnvironment {
    type Episode = PatientEpisode;

    fn n_actions(&self) -> usize {
        self.grid.len()
    }

    fn begin(&self, rng: &mut SimRng) -> Result<PatientEpisode> {
        let vp = self.cohort.sample_patient(&self.model, &self.class, rng);
        let params = vp.parameters(&self.model)?;
        Ok(PatientEpisode {
            state: baseline_state(params.circ0),
            params,
            bsa: vp.covariates.bsa,
            cycle: 0,
            nadirs: Vec::new(),
        })
    }

    fn step(&self, ep: &mut PatientEpisode, action: usize, rng: &mut SimRng) -> Result<Grade> {
        ep.treat(&self.model, self.grid.level(action), self.cycle_length, self.solver, rng)
            .map(|nadir| self.scale.grade_unchecked(nadir))
    }
}

impl PatientEpisode {
    /// Simulates one cycle at `dose_per_m2` and returns its nadir. The
    /// cycle's IOV is drawn from the prior when not already present.
    pub fn treat(
        &mut self,
        model: &PopulationModel,
        dose_per_m2: f64,
        cycle_length: f64,
        solver: SolverOptions,
        rng: &mut SimRng,
    ) -> Result<f64> {
        if self.params.kappa.len() <= self.cycle {
            let iov = model.iov_variances();
            while self.params.kappa.len() <= self.cycle {
                self.params.kappa.push(sample_effects(&iov, rng));
            }
        }
        let sim = Simulator::<f64>::new(solver);
        let mut spec = CycleSpec::new(self.cycle as f64 * cycle_length, dose_per_m2 * self.bsa);
        spec.length = cycle_length;
        let run = sim.run_cycle(model, &self.params.occasion(self.cycle), self.state, &spec, &[], false)?;
        self.state = run.end;
        self.cycle += 1;
        self.nadirs.push(run.nadir);
        Ok(run.nadir)
    }
}
