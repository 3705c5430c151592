//! Offline planning over the grade-history tree: UCT-based MCTS and
//! tabular Q-planning produce the population action values.

pub mod env;
pub mod mcts;
pub mod table;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortConfig, CovariateClass, PatientState, DECISION_STATES_PER_CLASS};
use crate::error::{Error, Result};
use crate::ode::SolverOptions;
use crate::pkpd::model::PopulationModel;
use crate::policies::grid::DoseGrid;
use crate::policies::reward::RewardSpec;
use crate::rng::{substream, tag};

pub use env::{PatientEpisode, PkPdEnvironment};
pub use mcts::{
    discounted_return, epsilon, mcts_train, puct_select, q_learning_update, q_planning, run_episode,
    uct_select, Environment, EpisodeOutcome, Priors, QPlanningConfig, SearchParams,
};
pub use table::{incremental_mean, QTable, QTableHeader, Slab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Episodes per covariate class.
    pub episodes: u64,
    pub gamma: f64,
    pub c_uct: f64,
    pub reward_bounds: [f64; 2],
    pub rewards: RewardSpec,
    pub grid: DoseGrid,
    pub cycles: usize,
    pub solver: SolverOptions,
    pub cohort: CohortConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            episodes: 10_000,
            gamma: 0.5,
            c_uct: 3.0,
            reward_bounds: [-2.0, 1.0],
            rewards: RewardSpec::default(),
            grid: DoseGrid::default(),
            cycles: crate::cohort::MAX_CYCLES,
            solver: SolverOptions::planning(),
            cohort: CohortConfig::default(),
        }
    }
}

impl PlannerConfig {
    pub fn search_params(&self) -> SearchParams {
        SearchParams {
            gamma: self.gamma,
            c_uct: self.c_uct,
            reward_bounds: self.reward_bounds,
            rewards: self.rewards.grade_rewards,
            cycles: self.cycles,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::InvalidInput("need at least one episode".into()));
        }
        self.search_params().validate()?;
        self.rewards.validate()?;
        self.grid.validate()?;
        self.cohort.validate()
    }

    pub fn environment(&self, model: &PopulationModel, class: CovariateClass) -> PkPdEnvironment {
        PkPdEnvironment {
            model: model.clone(),
            cohort: self.cohort.clone(),
            class,
            grid: self.grid,
            scale: Default::default(),
            solver: self.solver,
            cycle_length: crate::pkpd::simulate::DEFAULT_CYCLE_LENGTH,
        }
    }
}

/// Trains one slab per listed class with UCT. Classes run in parallel, each
/// on its own random stream, so the result does not depend on thread count.
pub fn train_classes(model: &PopulationModel, config: &PlannerConfig, classes: &[usize], seed: u64) -> Result<QTable> {
    config.validate()?;
    let params = config.search_params();
    let slabs: Vec<(usize, Slab, u64)> = classes
        .par_iter()
        .map(|&l| {
            let class = CovariateClass::from_index(l)?;
            let env = config.environment(model, class);
            let mut slab = Slab::new(DECISION_STATES_PER_CLASS, config.grid.len());
            let mut rng = substream(seed, &[tag::TRAINING, l as u64]);
            let done = mcts_train(&mut slab, &env, &params, config.episodes, &mut rng, &mut |_, _, _| {});
            log::info!("class {l}: {done} episodes");
            Ok((l, slab, done))
        })
        .collect::<Result<_>>()?;
    let mut table = QTable::new(config.grid.len(), seed, serde_json::to_value(config)?);
    for (l, slab, done) in slabs {
        table.insert(l, slab, done)?;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyChoice {
    pub action: usize,
    pub q: f64,
    /// Number of trailing grades dropped to reach a visited ancestor; 0 when
    /// the state itself was visited.
    pub fallback_depth: usize,
}

/// Greedy dose index for `state`. Unvisited states fall back to their
/// nearest visited ancestor.
pub fn greedy_action(table: &QTable, state: &PatientState) -> Result<GreedyChoice> {
    table.locate(state)?;
    for drop in 0..=state.grades.len() {
        let ancestor = PatientState {
            class: state.class,
            grades: state.grades[..state.grades.len() - drop].to_vec(),
        };
        let (slab, row) = table.locate(&ancestor)?;
        if let Some(a) = slab.argmax_visited(row) {
            if drop > 0 {
                log::debug!("state {:?} unvisited; using ancestor {drop} levels up", state.grades);
            }
            return Ok(GreedyChoice {
                action: a,
                q: slab.q_row(row)[a],
                fallback_depth: drop,
            });
        }
    }
    Err(Error::MissingPrerequisite(format!(
        "class {} has no visited states",
        state.class.index()
    )))
}
