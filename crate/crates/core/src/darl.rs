//! Decision-time planning for one patient: a local search tree rooted at the
//! current grade history, driven by members drawn from the posterior and
//! guided by priors derived from the population action values.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{depth_offset, Grade, GradeScale, PatientState, N_GRADES};
use crate::error::{Error, Result};
use crate::inference::patient::{grade_probabilities, map_grade, posterior_expected_nadir};
use crate::inference::PatientEnsemble;
use crate::ode::SolverOptions;
use crate::pkpd::model::{IndividualParameters, PopulationModel};
use crate::pkpd::system::N_STATES;
use crate::planner::mcts::{run_episode, Environment, Priors, SearchParams};
use crate::planner::table::{row_of, QTable, Slab};
use crate::planner::PatientEpisode;
use crate::policies::grid::DoseGrid;
use crate::rng::SimRng;

/// Softmax of a population q row followed by Gaussian smoothing over the
/// dose index, with the kernel renormalized at the grid edges. Unvisited entries (`n == 0`) take the minimum of the visited
/// ones; a row with no visits gives the uniform distribution.
pub fn boltzmann_priors(q: &[f64], n: Option<&[u32]>, bandwidth: f64) -> Vec<f64> {
    let visited = |a: usize| n.is_none_or(|n| n[a] > 0);
    let floor = (0..q.len())
        .filter(|&a| visited(a))
        .map(|a| q[a])
        .fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        return vec![1.0 / q.len() as f64; q.len()];
    }
    let values: Vec<f64> = (0..q.len()).map(|a| if visited(a) { q[a] } else { floor }).collect();
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    if bandwidth > 0.0 {
        let k = |d: f64| (-0.5 * (d / bandwidth).powi(2)).exp();
        p = (0..p.len())
            .map(|i| {
                let (mut num, mut den) = (0.0, 0.0);
                for (j, pj) in p.iter().enumerate() {
                    let w = k(i as f64 - j as f64);
                    num += pj * w;
                    den += w;
                }
                num / den
            })
            .collect();
    }
    let total: f64 = p.iter().sum();
    p.iter().map(|x| x / total).collect()
}

/// Priors for a local tree, read from the population slab of the patient's
/// class at the root history `prefix` plus the local suffix.
pub struct PopulationPriors<'a> {
    slab: &'a Slab,
    prefix: Vec<Grade>,
    bandwidth: f64,
    cache: HashMap<usize, Vec<f64>>,
}

impl<'a> PopulationPriors<'a> {
    pub fn new(slab: &'a Slab, prefix: &[Grade], bandwidth: f64) -> Self {
        Self {
            slab,
            prefix: prefix.to_vec(),
            bandwidth,
            cache: HashMap::new(),
        }
    }
}

impl Priors for PopulationPriors<'_> {
    fn row(&mut self, row: usize, suffix: &[Grade]) -> Result<&[f64]> {
        if !self.cache.contains_key(&row) {
            let mut history = self.prefix.clone();
            history.extend_from_slice(suffix);
            let r = row_of(&history)?;
            let p = boltzmann_priors(self.slab.q_row(r), Some(self.slab.n_row(r)), self.bandwidth);
            self.cache.insert(row, p);
        }
        Ok(&self.cache[&row])
    }
}

/// Uniform priors; with these the search is plain UCT up to the 1/n_actions
/// scaling of the exploration term.
pub struct UniformPriors(pub Vec<f64>);

impl UniformPriors {
    pub fn new(n_actions: usize) -> Self {
        Self(vec![1.0 / n_actions as f64; n_actions])
    }
}

impl Priors for UniformPriors {
    fn row(&mut self, _row: usize, _suffix: &[Grade]) -> Result<&[f64]> {
        Ok(&self.0)
    }
}

/// A patient drawn from a weighted posterior ensemble, continued from the
/// current cycle start with fresh IOV for every future cycle.
#[derive(Debug, Clone)]
pub struct PosteriorEnvironment {
    pub model: PopulationModel,
    pub members: Vec<(IndividualParameters, [f64; N_STATES])>,
    cumulative: Vec<f64>,
    pub bsa: f64,
    pub cycle: usize,
    pub grid: DoseGrid,
    pub scale: GradeScale,
    pub solver: SolverOptions,
    pub cycle_length: f64,
}

impl PosteriorEnvironment {
    pub fn from_ensemble(ensemble: &PatientEnsemble, grid: DoseGrid, scale: GradeScale) -> Result<Self> {
        if ensemble.len() == 0 {
            return Err(Error::InvalidInput("empty ensemble".into()));
        }
        let ctx = &ensemble.context;
        let t = ensemble.time();
        let c = (t / ctx.cycle_length).round();
        if (t - c * ctx.cycle_length).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("ensemble time {t} h is not at a cycle start")));
        }
        let c = c as usize;
        let members = ensemble
            .ensemble
            .members
            .iter()
            .map(|m| {
                let mut params = m.params.clone();
                params.kappa.truncate(c);
                (params, m.state)
            })
            .collect();
        Self::new(
            ctx.model.clone(),
            members,
            ensemble.weights(),
            ctx.covariates.bsa,
            c,
            grid,
            scale,
            ctx.solver,
            ctx.cycle_length,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: PopulationModel,
        members: Vec<(IndividualParameters, [f64; N_STATES])>,
        weights: &[f64],
        bsa: f64,
        cycle: usize,
        grid: DoseGrid,
        scale: GradeScale,
        solver: SolverOptions,
        cycle_length: f64,
    ) -> Result<Self> {
        if members.is_empty() || members.len() != weights.len() {
            return Err(Error::InvalidInput("members and weights must be non-empty and aligned".into()));
        }
        let mut acc = 0.0;
        let cumulative: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w.max(0.0);
                acc
            })
            .collect();
        if !(acc > 0.0) {
            return Err(Error::InvalidInput("ensemble weights sum to zero".into()));
        }
        Ok(Self {
            model,
            members,
            cumulative,
            bsa,
            cycle,
            grid,
            scale,
            solver,
            cycle_length,
        })
    }

    fn pick(&self, rng: &mut SimRng) -> usize {
        let total = self.cumulative[self.cumulative.len() - 1];
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.members.len() - 1)
    }
}

impl Environment for PosteriorEnvironment {
    type Episode = PatientEpisode;

    fn n_actions(&self) -> usize {
        self.grid.len()
    }

    fn begin(&self, rng: &mut SimRng) -> Result<PatientEpisode> {
        let (params, state) = &self.members[self.pick(rng)];
        Ok(PatientEpisode {
            params: params.clone(),
            bsa: self.bsa,
            state: *state,
            cycle: self.cycle,
            nadirs: Vec::new(),
        })
    }

    fn step(&self, ep: &mut PatientEpisode, action: usize, rng: &mut SimRng) -> Result<Grade> {
        ep.treat(&self.model, self.grid.level(action), self.cycle_length, self.solver, rng)
            .map(|nadir| self.scale.grade_unchecked(nadir))
    }
}

#[derive(Debug, Clone)]
pub struct OnlinePlan {
    pub slab: Slab,
    pub action: usize,
    pub completed: u64,
}

/// Runs `episodes` episodes on a fresh local tree rooted at cycle
/// `start_depth` and returns the most valuable visited root dose.
pub fn plan_online<E: Environment>(
    env: &E,
    start_depth: usize,
    params: &SearchParams,
    mut priors: Option<&mut dyn Priors>,
    episodes: u64,
    rng: &mut SimRng,
) -> Result<OnlinePlan> {
    if start_depth >= params.cycles {
        return Err(Error::LeafState);
    }
    let mut slab = Slab::new(depth_offset(params.cycles - start_depth), env.n_actions());
    let mut completed = 0;
    for k in 0..episodes {
        let p: Option<&mut dyn Priors> = match &mut priors {
            Some(p) => Some(&mut **p),
            None => None,
        };
        match run_episode(&mut slab, env, start_depth, params, p, rng, &mut |_, _, _| {}) {
            Ok(_) => completed += 1,
            Err(e) => log::warn!("online episode {k} aborted: {e}"),
        }
    }
    let action = slab
        .argmax_visited(0)
        .ok_or_else(|| Error::MissingPrerequisite("no online episode completed".into()))?;
    Ok(OnlinePlan { slab, action, completed })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateEstimate {
    #[default]
    ExpectedNadir,
    MapGrade,
}

/// Grade assigned to the last cycle from member nadirs.
pub fn estimate_grade(weights: &[f64], nadirs: &[f64], mode: StateEstimate, scale: &GradeScale) -> Grade {
    match mode {
        StateEstimate::ExpectedNadir => scale.grade_unchecked(posterior_expected_nadir(weights, nadirs)),
        StateEstimate::MapGrade => {
            let grades: Vec<Grade> = nadirs.iter().map(|&n| scale.grade_unchecked(n)).collect();
            map_grade(&grade_probabilities(weights, &grades))
        }
    }
}

/// Appends the estimated grade of cycle `previous.cycle()` to the history.
pub fn estimate_state(
    ensemble: &PatientEnsemble,
    previous: &PatientState,
    mode: StateEstimate,
    scale: &GradeScale,
) -> Result<PatientState> {
    let c = previous.cycle();
    let nadirs = ensemble.member_nadirs(c)?;
    Ok(previous.with_grade(estimate_grade(ensemble.weights(), &nadirs, mode, scale)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarlConfig {
    /// Online episodes per decision.
    pub episodes: u64,
    /// Kernel bandwidth in grid steps; 0 disables smoothing.
    pub bandwidth: f64,
    pub mode: StateEstimate,
    pub search: SearchParams,
    pub grid: DoseGrid,
    pub scale: GradeScale,
}

impl Default for DarlConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            bandwidth: 2.0,
            mode: StateEstimate::default(),
            search: SearchParams::default(),
            grid: DoseGrid::default(),
            scale: GradeScale::default(),
        }
    }
}

/// Per-decision record of an online plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarlReport {
    pub class: usize,
    pub grades: Vec<Grade>,
    pub cycle: usize,
    pub doses_per_m2: Vec<f64>,
    pub prior: Vec<f64>,
    pub population_q: Vec<f64>,
    pub local_q: Vec<f64>,
    pub visits: Vec<u32>,
    pub episodes: u64,
    pub completed: u64,
    pub action: usize,
    pub dose_per_m2: f64,
    pub dose_mg: f64,
}

/// Chooses the next dose for a patient whose ensemble sits at the start of
/// cycle `state.cycle()`.
pub fn plan_dose<R: Rng + ?Sized>(
    table: &QTable,
    ensemble: &PatientEnsemble,
    state: &PatientState,
    config: &DarlConfig,
    rng: &mut R,
) -> Result<DarlReport> {
    if table.n_actions() != config.grid.len() {
        return Err(Error::Dimension {
            what: "dose grid",
            expected: table.n_actions(),
            got: config.grid.len(),
        });
    }
    let env = PosteriorEnvironment::from_ensemble(ensemble, config.grid, config.scale)?;
    let c = state.cycle();
    if env.cycle != c {
        return Err(Error::InvalidInput(format!(
            "state is at cycle {c} but the ensemble is at cycle {}",
            env.cycle
        )));
    }
    let (slab, root) = table.locate(state)?;
    let mut priors = PopulationPriors::new(slab, &state.grades, config.bandwidth);
    let prior = priors.row(0, &[])?.to_vec();
    let mut local_rng = crate::rng::substream(rng.random(), &[]);
    let plan = plan_online(&env, c, &config.search, Some(&mut priors), config.episodes, &mut local_rng)?;
    let dose_per_m2 = config.grid.level(plan.action);
    Ok(DarlReport {
        class: state.class.index(),
        grades: state.grades.clone(),
        cycle: c,
        doses_per_m2: config.grid.levels(),
        prior,
        population_q: slab.q_row(root).to_vec(),
        local_q: plan.slab.q_row(0).to_vec(),
        visits: plan.slab.n_row(0).to_vec(),
        episodes: config.episodes,
        completed: plan.completed,
        action: plan.action,
        dose_per_m2,
        dose_mg: dose_per_m2 * env.bsa,
    })
}

const _: () = assert!(N_GRADES == 5);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn boltzmann_examples() {
        let p = boltzmann_priors(&[0.0; 39], None, 2.0);
        assert!(p.iter().all(|x| (x - 1.0 / 39.0).abs() < 1e-12));
        let e = std::f64::consts::E;
        let p = boltzmann_priors(&[1.0, 0.0, 0.0], None, 0.0);
        let want = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let q = [0.3, -1.2, 0.8, 0.1, 0.0];
        let shifted: Vec<f64> = q.iter().map(|x| x + 40.0).collect();
        for (a, b) in boltzmann_priors(&q, None, 2.0).iter().zip(boltzmann_priors(&shifted, None, 2.0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn unvisited_entries_take_row_minimum() {
        let q = [0.5, 99.0, -0.5, 0.0];
        let p = boltzmann_priors(&q, Some(&[3, 0, 2, 0]), 0.0);
        let want = boltzmann_priors(&[0.5, -0.5, -0.5, -0.5], None, 0.0);
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(p.iter().all(|&x| x > 0.0));
        let p = boltzmann_priors(&[7.0, 1.0], Some(&[0, 0]), 2.0);
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn grade_estimates() {
        let s = GradeScale::default();
        assert_eq!(estimate_grade(&[0.5, 0.5], &[0.4, 0.4], StateEstimate::ExpectedNadir, &s), 4);
        assert_eq!(estimate_grade(&[0.6, 0.4], &[1.8, 2.2], StateEstimate::ExpectedNadir, &s), 1);
        assert_eq!(estimate_grade(&[0.6, 0.4], &[1.8, 2.2], StateEstimate::MapGrade, &s), 1);
        assert_eq!(estimate_grade(&[0.4, 0.6], &[1.8, 2.2], StateEstimate::MapGrade, &s), 0);
    }

    struct Toy {
        weights: Vec<f64>,
        grades: Vec<Vec<Grade>>,
    }

    impl Environment for Toy {
        type Episode = usize;
        fn n_actions(&self) -> usize {
            self.grades[0].len()
        }
        fn begin(&self, rng: &mut SimRng) -> Result<usize> {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (m, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    return Ok(m);
                }
            }
            Ok(self.weights.len() - 1)
        }
        fn step(&self, m: &mut usize, a: usize, _: &mut SimRng) -> Result<Grade> {
            Ok(self.grades[*m][a])
        }
    }

    #[test]
    fn one_cycle_local_q_matches_weighted_enumeration() {
        let toy = Toy {
            weights: vec![0.5, 0.3, 0.2],
            grades: vec![vec![0, 2, 4], vec![1, 3, 4], vec![0, 0, 2]],
        };
        let params = SearchParams::default();
        let mut rng = substream(3, &[]);
        let plan = plan_online(&toy, 5, &params, None, 40_000, &mut rng).unwrap();
        for a in 0..3 {
            let exact: f64 = toy.weights.iter().zip(&toy.grades).map(|(w, g)| w * params.reward(g[a])).sum();
            let n = plan.slab.n_row(0)[a] as f64;
            let sd = 3.0 / n.sqrt();
            assert!((plan.slab.q_row(0)[a] - exact).abs() < 4.0 * sd, "dose {a}");
        }
        assert_eq!(plan.action, 1);
    }

    #[test]
    fn visits_follow_priors_when_values_are_flat() {
        let toy = Toy {
            weights: vec![1.0],
            grades: vec![vec![2; 5]],
        };
        let params = SearchParams::default();
        let prior = vec![0.05, 0.1, 0.15, 0.3, 0.4];
        let mut positive = 0;
        for seed in 0..20 {
            let mut priors = UniformPriors(prior.clone());
            let mut rng = substream(seed, &[]);
            let plan = plan_online(&toy, 5, &params, Some(&mut priors), 200, &mut rng).unwrap();
            let n: Vec<f64> = plan.slab.n_row(0).iter().map(|&x| x as f64).collect();
            if spearman(&n, &prior) > 0.0 {
                positive += 1;
            }
        }
        assert!(positive >= 19, "{positive}");
    }

    fn ranks(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|a| {
                let less = x.iter().filter(|b| *b < a).count() as f64;
                let eq = x.iter().filter(|b| *b == a).count() as f64;
                less + (eq + 1.0) / 2.0
            })
            .collect()
    }

    fn spearman(x: &[f64], y: &[f64]) -> f64 {
        let (rx, ry) = (ranks(x), ranks(y));
        let n = x.len() as f64;
        let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn uniform_priors_reproduce_uct() {
        let toy = Toy {
            weights: vec![0.4, 0.6],
            grades: vec![vec![0, 1, 2, 3, 4, 2], vec![4, 2, 1, 0, 3, 2]],
        };
        let uct = SearchParams::default();
        let puct = SearchParams { c_uct: uct.c_uct * 6.0, ..uct.clone() };
        let a = plan_online(&toy, 3, &uct, None, 500, &mut substream(9, &[])).unwrap();
        let mut pri = UniformPriors::new(6);
        let b = plan_online(&toy, 3, &puct, Some(&mut pri), 500, &mut substream(9, &[])).unwrap();
        assert_eq!(a.slab.n, b.slab.n);
        assert_eq!(a.action, b.action);
        for (x, y) in a.slab.q.iter().zip(&b.slab.q) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
