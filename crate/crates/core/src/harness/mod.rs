//! Batch simulation studies over virtual patient cohorts.

pub mod decide;
pub mod export;
pub mod metrics;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{CohortConfig, CovariateClass, Grade, GradeScale, MAX_CYCLES, N_CLASSES};
use crate::darl::estimate_grade;
use crate::darl::StateEstimate;
use crate::error::{Error, Result};
use crate::inference::{FilterConfig, MapEstimate, PatientEnsemble};
use crate::ode::SolverOptions;
use crate::pkpd::model::PopulationModel;
use crate::pkpd::observe::{noisy, Observation};
use crate::pkpd::simulate::{CycleSpec, Dose, Observable, Simulator, DEFAULT_CYCLE_LENGTH, DEFAULT_INFUSION_HOURS};
use crate::pkpd::system::{baseline_state, idx};
use crate::planner::table::QTable;
use crate::rng::{substream, tag};

pub use decide::{decide, Decision, DecisionInput, PolicyKind, PolicySettings};
pub use metrics::{evaluate_all, grade_rmse, quantile, weighted_quantile, Aggregates, Band, PatientOutcome, TimeBand, TrialMetrics};

/// Which grade the dose rules see after each cycle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradeSource {
    /// Grade of the lowest ANC observation in the cycle.
    #[default]
    Observation,
    /// Grade of the true model nadir.
    ModelNadir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub policy: PolicyKind,
    pub settings: PolicySettings,
    pub patients: usize,
    pub seed: u64,
    /// Days after each dose with an ANC sample. Day 0 is the pre-dose count
    /// of the cycle (the first cycle's baseline is the covariate ANC0).
    pub observation_days: Vec<f64>,
    pub grade_source: GradeSource,
    pub cycles: usize,
    /// Restrict the cohort to these covariate classes (uniform among them).
    pub classes: Option<Vec<usize>>,
    pub cohort: CohortConfig,
    pub filter: FilterConfig,
    /// Maintain a posterior ensemble and record grade estimates even when
    /// the policy does not need one.
    pub track_estimates: bool,
    /// Days whose single-observation grade is recorded for comparison.
    pub probe_days: Vec<f64>,
    pub truth_solver: SolverOptions,
    pub cycle_length: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            policy: PolicyKind::Standard,
            settings: PolicySettings::default(),
            patients: 200,
            seed: 0,
            observation_days: vec![0.0, 15.0],
            grade_source: GradeSource::default(),
            cycles: MAX_CYCLES,
            classes: None,
            cohort: CohortConfig::default(),
            filter: FilterConfig::default(),
            track_estimates: false,
            probe_days: Vec::new(),
            truth_solver: SolverOptions::default(),
            cycle_length: DEFAULT_CYCLE_LENGTH,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 || self.cycles == 0 || self.cycles > MAX_CYCLES {
            return Err(Error::InvalidInput("need at least one patient and 1–6 cycles".into()));
        }
        let days = self.cycle_length / 24.0;
        if let Some(d) = self
            .observation_days
            .iter()
            .chain(&self.probe_days)
            .find(|&&d| !(0.0..days).contains(&d))
        {
            return Err(Error::InvalidInput(format!("observation day {d} outside the cycle")));
        }
        if let Some(cl) = &self.classes {
            if cl.is_empty() || cl.iter().any(|&l| l >= N_CLASSES) {
                return Err(Error::InvalidInput("class list must be non-empty and in range".into()));
            }
        }
        self.cohort.validate()?;
        self.settings.grid.validate()?;
        self.settings.rewards.validate()
    }

    fn needs_ensemble(&self) -> bool {
        self.track_estimates
            || matches!(self.policy, PolicyKind::Da | PolicyKind::DaRl)
            || (self.policy == PolicyKind::Rl && self.settings.rl_da_states)
    }

    /// Observation times (h) of cycle `c`, excluding the first baseline and
    /// including the next cycle's pre-dose count.
    fn observation_times(&self, c: usize) -> Vec<f64> {
        let start = c as f64 * self.cycle_length;
        let mut t: Vec<f64> = self
            .observation_days
            .iter()
            .filter(|&&d| d > 0.0)
            .map(|d| start + d * 24.0)
            .collect();
        if self.observation_days.contains(&0.0) {
            t.push(start + self.cycle_length);
        }
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientFailure {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub policy: PolicyKind,
    pub metrics: TrialMetrics,
    pub outcomes: Vec<PatientOutcome>,
    pub failures: Vec<PatientFailure>,
}

/// Runs the study. Patients are independent and keyed by index, so the
/// result is the same whatever the number of threads.
pub fn run_trial(model: &PopulationModel, config: &TrialConfig, table: Option<&QTable>) -> Result<TrialResult> {
    config.validate()?;
    if config.policy.needs_table() && table.is_none() {
        return Err(Error::MissingPrerequisite(format!("policy {} needs a trained Q table", config.policy)));
    }
    let results: Vec<Result<PatientOutcome>> = (0..config.patients)
        .into_par_iter()
        .map(|i| run_patient(model, config, table, i))
        .collect();
    let mut outcomes = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("patient {i} excluded: {e}");
                failures.push(PatientFailure {
                    index: i,
                    message: e.to_string(),
                });
            }
        }
    }
    let metrics = TrialMetrics::compute(
        &outcomes,
        failures.len(),
        config.cycles,
        &config.settings.rewards,
        config.settings.darl.search.gamma,
    );
    Ok(TrialResult {
        policy: config.policy,
        metrics,
        outcomes,
        failures,
    })
}

/// Observation noise depends only on the patient, the time and the kind, so
/// every policy sees the same noise at the same sampling time.
fn measure(config: &TrialConfig, model: &PopulationModel, i: usize, t: f64, kind: Observable, h: f64) -> Result<Observation> {
    let key = (t * 1000.0).round() as u64;
    let mut rng = substream(config.seed, &[tag::OBSERVATION, i as u64, key, kind as u64]);
    Ok(Observation {
        time: t,
        value: noisy(h, model.residual_sd(kind), &mut rng)?,
        kind,
    })
}

/// Simulates one patient through all cycles under the configured policy.
pub fn run_patient(model: &PopulationModel, config: &TrialConfig, table: Option<&QTable>, i: usize) -> Result<PatientOutcome> {
    let scale: GradeScale = config.settings.scale;
    let len = config.cycle_length;
    let mut rng = substream(config.seed, &[tag::COHORT, i as u64]);
    let class = match &config.classes {
        Some(list) => CovariateClass::from_index(list[rng.random_range(0..list.len())])?,
        None => CovariateClass::from_index(rng.random_range(0..N_CLASSES))?,
    };
    let mut cohort = config.cohort.clone();
    cohort.cycles = config.cycles;
    let vp = cohort.sample_patient(model, &class, &mut rng);
    let cov = vp.covariates;
    let truth = vp.parameters(model)?;
    let sim = Simulator::<f64>::new(config.truth_solver);

    let mut filter_rng = substream(config.seed, &[tag::FILTER, i as u64]);
    let mut ensemble = if config.needs_ensemble() {
        let mut e = PatientEnsemble::from_prior(model, cov, config.filter, &mut filter_rng)?;
        e.context.cycle_length = len;
        e.context.solver = config.settings.planning_solver;
        Some(e)
    } else {
        None
    };

    let mut state = baseline_state(truth.circ0);
    let mut doses: Vec<Dose> = Vec::new();
    let mut observations: Vec<Observation> = Vec::new();
    let mut out = PatientOutcome {
        index: i,
        class: class.index(),
        covariates: cov,
        doses_mg: Vec::new(),
        nadirs: Vec::new(),
        grades: Vec::new(),
        policy_grades: Vec::new(),
        estimated_grades: Vec::new(),
        probe_grades: Vec::new(),
        daily_anc: vec![truth.circ0],
        observations: Vec::new(),
    };
    let mut estimated: Vec<Grade> = Vec::new();
    let mut warm: Option<MapEstimate> = None;

    for c in 0..config.cycles {
        let start = c as f64 * len;
        let mut policy_rng = substream(config.seed, &[tag::POLICY, i as u64, c as u64]);
        let input = DecisionInput {
            model,
            covariates: &cov,
            class,
            cycle: c,
            cycle_length: len,
            doses: &doses,
            observations: &observations,
            grades: &out.policy_grades,
            estimated_grades: &estimated,
            ensemble: ensemble.as_ref(),
            table,
            map_warm_start: warm.as_ref(),
        };
        let decision = decide(config.policy, &config.settings, &input, &mut policy_rng)?;
        if decision.map_estimate.is_some() {
            warm = decision.map_estimate;
        }
        let dose = Dose {
            time: start,
            amount_mg: decision.dose_mg,
            duration: DEFAULT_INFUSION_HOURS,
        };
        doses.push(dose);
        out.doses_mg.push(dose.amount_mg);

        let anc_times = config.observation_times(c);
        let drug_times: Vec<f64> = if config.policy == PolicyKind::Pk {
            vec![start + config.settings.pk_sample_hours]
        } else {
            Vec::new()
        };
        let probe_times: Vec<f64> = config.probe_days.iter().map(|d| start + d * 24.0).collect();
        let mut probes: Vec<f64> = anc_times.iter().chain(&drug_times).chain(&probe_times).copied().collect();
        probes.sort_by(f64::total_cmp);
        probes.dedup();
        let mut spec = CycleSpec::new(start, dose.amount_mg);
        spec.length = len;
        let run = sim.run_cycle(model, &truth.occasion(c), state, &spec, &probes, true)?;
        let at = |t: f64| run.probes[probes.iter().position(|&p| p == t).expect("probe time")];
        let occ = truth.occasion(c);

        let mut new_obs = Vec::new();
        for &t in &drug_times {
            let h = at(t)[idx::CENT] / occ.v1;
            new_obs.push(measure(config, model, i, t, Observable::Drug, h)?);
        }
        for &t in &anc_times {
            new_obs.push(measure(config, model, i, t, Observable::Neutrophils, at(t)[idx::CIRC])?);
        }
        new_obs.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut probe_grades = Vec::new();
        for &t in &probe_times {
            let o = measure(config, model, i, t, Observable::Neutrophils, at(t)[idx::CIRC])?;
            probe_grades.push(scale.grade_unchecked(o.value));
        }
        out.probe_grades.push(probe_grades);

        let nadir = run.nadir;
        out.nadirs.push(nadir);
        out.grades.push(scale.grade_unchecked(nadir));
        let reported = match config.grade_source {
            GradeSource::ModelNadir => scale.grade_unchecked(nadir),
            GradeSource::Observation => {
                let low = new_obs
                    .iter()
                    .filter(|o| o.kind == Observable::Neutrophils)
                    .map(|o| o.value)
                    .fold(f64::INFINITY, f64::min);
                if low.is_finite() {
                    scale.grade_unchecked(low)
                } else {
                    0
                }
            }
        };
        out.policy_grades.push(reported);
        let days = (len / 24.0).round() as usize;
        for d in 1..=days {
            out.daily_anc.push(run.circ[(d as f64 * 24.0 / spec.grid_step).round() as usize]);
        }

        if let Some(ens) = ensemble.as_mut() {
            ens.add_dose(dose)?;
            for o in new_obs.iter().filter(|o| o.kind == Observable::Neutrophils) {
                match ens.assimilate(o, &mut filter_rng) {
                    Ok(_) | Err(Error::DegenerateUpdate) => {}
                    Err(e) => return Err(e),
                }
            }
            ens.advance_to(start + len, &mut filter_rng)?;
            let nadirs = ens.member_nadirs(c)?;
            let g_exp = estimate_grade(ens.weights(), &nadirs, StateEstimate::ExpectedNadir, &scale);
            let g_map = estimate_grade(ens.weights(), &nadirs, StateEstimate::MapGrade, &scale);
            out.estimated_grades.push([g_exp, g_map]);
            estimated.push(match config.settings.darl.mode {
                StateEstimate::ExpectedNadir => g_exp,
                StateEstimate::MapGrade => g_map,
            });
        }
        observations.extend(new_obs);
        state = run.end;
    }
    out.observations = observations;
    Ok(out)
}

/// RMSE of grade estimates against the true grades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorRow {
    pub estimator: String,
    /// Per cycle, then overall as the last entry.
    pub per_cycle: Vec<f64>,
    pub overall: f64,
}

/// Compares single-observation grades at each probe day with the two
/// posterior estimates. The ensemble assimilates `config.observation_days`.
pub fn compare_state_estimators(model: &PopulationModel, config: &TrialConfig) -> Result<Vec<EstimatorRow>> {
    let mut cfg = config.clone();
    cfg.track_estimates = true;
    let result = run_trial(model, &cfg, None)?;
    estimator_table(&result.outcomes, &cfg.probe_days, cfg.cycles)
}

/// RMSE rows from outcomes recorded with posterior estimates and probe grades.
pub fn estimator_table(outcomes: &[PatientOutcome], probe_days: &[f64], cycles: usize) -> Result<Vec<EstimatorRow>> {
    if outcomes
        .iter()
        .any(|p| p.estimated_grades.len() < cycles || p.probe_grades.iter().any(|g| g.len() != probe_days.len()))
    {
        return Err(Error::MissingPrerequisite("outcomes lack posterior estimates or probe grades".into()));
    }
    let row = |name: String, pick: &dyn Fn(&PatientOutcome, usize) -> Grade| {
        let per_cycle = (0..cycles)
            .map(|c| grade_rmse(outcomes.iter().map(|p| (pick(p, c), p.grades[c]))))
            .collect();
        let overall = grade_rmse(
            outcomes
                .iter()
                .flat_map(|p| (0..cycles).map(move |c| (pick(p, c), p.grades[c]))),
        );
        EstimatorRow {
            estimator: name,
            per_cycle,
            overall,
        }
    };
    let mut rows = Vec::new();
    for (k, d) in probe_days.iter().enumerate() {
        rows.push(row(format!("observation-day-{d}"), &|p, c| p.probe_grades[c][k]));
    }
    rows.push(row("expected-nadir".into(), &|p, c| p.estimated_grades[c][0]));
    rows.push(row("map-grade".into(), &|p, c| p.estimated_grades[c][1]));
    Ok(rows)
}
