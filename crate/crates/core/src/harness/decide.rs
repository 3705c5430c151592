//! One dosing decision under any policy, shared by the trial runner and the
//! session service.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cohort::{CovariateClass, Grade, GradeScale, PatientState};
use crate::darl::{plan_dose, DarlConfig};
use crate::error::{Error, Result};
use crate::inference::{MapConfig, MapEstimate, MapProblem, PatientEnsemble};
use crate::ode::SolverOptions;
use crate::pkpd::model::{PatientCovariates, PopulationModel};
use crate::pkpd::observe::Observation;
use crate::pkpd::simulate::{Dose, Observable, Simulator};
use crate::planner::table::QTable;
use crate::planner::greedy_action;
use crate::policies::{
    da_guided_dose, estimate_exposure, map_guided_dose, DoseGrid, MapMode, PkGuidedRuleTable, RewardSpec, StandardRule,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Standard,
    Pk,
    MapTarget,
    MapUtility,
    Da,
    Rl,
    DaRl,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Standard,
        PolicyKind::Pk,
        PolicyKind::MapTarget,
        PolicyKind::MapUtility,
        PolicyKind::Da,
        PolicyKind::Rl,
        PolicyKind::DaRl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Standard => "standard",
            PolicyKind::Pk => "pk",
            PolicyKind::MapTarget => "map-target",
            PolicyKind::MapUtility => "map-utility",
            PolicyKind::Da => "da",
            PolicyKind::Rl => "rl",
            PolicyKind::DaRl => "da-rl",
        }
    }

    pub fn needs_table(self) -> bool {
        matches!(self, PolicyKind::Rl | PolicyKind::DaRl)
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown policy '{s}'")))
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Configuration of every policy; each decision reads the part it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySettings {
    pub standard: StandardRule,
    pub pk: PkGuidedRuleTable,
    /// Hours after infusion start of the drug sample used by the PK rule.
    pub pk_sample_hours: f64,
    pub map: MapConfig,
    pub rewards: RewardSpec,
    pub darl: DarlConfig,
    pub grid: DoseGrid,
    pub scale: GradeScale,
    pub planning_solver: SolverOptions,
    /// Feed the RL policy posterior grade estimates instead of the reported grades.
    pub rl_da_states: bool,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            standard: StandardRule::default(),
            pk: PkGuidedRuleTable::default(),
            pk_sample_hours: 24.0,
            map: MapConfig::default(),
            rewards: RewardSpec::default(),
            darl: DarlConfig::default(),
            grid: DoseGrid::default(),
            scale: GradeScale::default(),
            planning_solver: SolverOptions::planning(),
            rl_da_states: false,
        }
    }
}

/// What a policy may know about the patient at the start of cycle `cycle`.
pub struct DecisionInput<'a> {
    pub model: &'a PopulationModel,
    pub covariates: &'a PatientCovariates,
    pub class: CovariateClass,
    /// 0-based cycle about to be dosed.
    pub cycle: usize,
    pub cycle_length: f64,
    /// Doses of the previous cycles.
    pub doses: &'a [Dose],
    /// All observations so far, excluding the baseline count.
    pub observations: &'a [Observation],
    /// Reported grades of the previous cycles.
    pub grades: &'a [Grade],
    /// Posterior grade estimates of the previous cycles.
    pub estimated_grades: &'a [Grade],
    pub ensemble: Option<&'a PatientEnsemble>,
    pub table: Option<&'a QTable>,
    pub map_warm_start: Option<&'a MapEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub policy: PolicyKind,
    pub dose_mg: f64,
    pub dose_per_m2: f64,
    /// Policy-specific explanation.
    pub report: serde_json::Value,
    #[serde(skip)]
    pub map_estimate: Option<MapEstimate>,
}

fn require<'a, T>(x: Option<&'a T>, what: &str, policy: PolicyKind) -> Result<&'a T> {
    x.ok_or_else(|| Error::MissingPrerequisite(format!("policy {policy} needs {what}")))
}

/// Proposes the dose for the cycle described by `input`.
pub fn decide<R: Rng + ?Sized>(
    policy: PolicyKind,
    settings: &PolicySettings,
    input: &DecisionInput<'_>,
    rng: &mut R,
) -> Result<Decision> {
    let bsa = input.covariates.bsa;
    let c = input.cycle;
    let start = c as f64 * input.cycle_length;
    let previous_mg = input.doses.last().map(|d| d.amount_mg);
    let previous_grade = if c > 0 { input.grades.get(c - 1).copied() } else { None };
    let mut map_estimate = None;
    let (dose_mg, report) = match policy {
        PolicyKind::Standard => {
            let d = settings.standard.dose(c + 1, previous_mg, previous_grade, bsa, &settings.grid);
            let reason = match (c, previous_grade) {
                (0, _) => format!("starting dose {} mg/m²", settings.standard.start_per_m2),
                (_, Some(4)) => format!("grade 4 in the previous cycle: {:.0} % reduction", settings.standard.reduction * 100.0),
                _ => "previous dose continued".to_string(),
            };
            (d, json!({ "rule": reason, "previous_grade": previous_grade }))
        }
        PolicyKind::Pk => {
            let exposure = if c == 0 {
                None
            } else {
                let prev_start = (c - 1) as f64 * input.cycle_length;
                let drug: Vec<Observation> = input
                    .observations
                    .iter()
                    .filter(|o| o.kind == Observable::Drug)
                    .copied()
                    .collect();
                Some(estimate_exposure(
                    input.model,
                    input.covariates,
                    input.doses,
                    &drug,
                    prev_start,
                    input.cycle_length,
                    settings.pk.threshold_um,
                )?)
            };
            let per_m2 = settings.pk.dose(
                c + 1,
                input.covariates,
                previous_mg.map(|m| m / bsa),
                previous_grade,
                exposure,
                &settings.grid,
            )?;
            (
                per_m2 * bsa,
                json!({ "exposure_h": exposure, "band": exposure.map(|e| settings.pk.band(e)), "previous_grade": previous_grade }),
            )
        }
        PolicyKind::MapTarget | PolicyKind::MapUtility => {
            let anc: Vec<Observation> = input
                .observations
                .iter()
                .filter(|o| o.kind == Observable::Neutrophils)
                .copied()
                .collect();
            let mut problem = MapProblem::new(input.model, input.covariates, input.doses, &anc, &settings.map);
            problem.cycle_length = input.cycle_length;
            let est = problem.estimate(input.map_warm_start)?;
            let mode = if policy == PolicyKind::MapTarget {
                MapMode::Target
            } else {
                MapMode::Utility
            };
            let d = map_guided_dose(&problem, &est, start, mode, &settings.rewards, &settings.grid, bsa)?;
            let report = json!({
                "estimate": est,
                "predicted_nadir": d.predicted_nadir,
                "objective": d.objective,
                "grid_doses_mg": d.grid_doses_mg,
                "grid_objective": d.grid_objective,
            });
            map_estimate = Some(est);
            (d.dose_mg, report)
        }
        PolicyKind::Da => {
            let ens = require(input.ensemble, "a posterior ensemble", policy)?;
            let members = ens.predictive(rng)?;
            let sim = Simulator::<f64>::new(settings.planning_solver);
            let d = da_guided_dose(
                &members,
                &sim,
                input.model,
                &settings.scale,
                &settings.rewards,
                settings.grid.bounds_mg(bsa),
            )?;
            let curve = d.profile.curve(&settings.grid.levels_mg(bsa));
            (d.dose_mg, json!({ "risk": d.risk, "curve": curve, "ess": ens.ess() }))
        }
        PolicyKind::Rl => {
            let table = require(input.table, "a trained Q table", policy)?;
            let grades = if settings.rl_da_states { input.estimated_grades } else { input.grades };
            let state = PatientState {
                class: input.class,
                grades: grades[..c].to_vec(),
            };
            let choice = greedy_action(table, &state)?;
            let (slab, row) = table.locate(&state)?;
            let per_m2 = settings.grid.level(choice.action);
            (
                per_m2 * bsa,
                json!({
                    "state": state,
                    "action": choice.action,
                    "fallback_depth": choice.fallback_depth,
                    "q": slab.q_row(row),
                    "visits": slab.n_row(row),
                }),
            )
        }
        PolicyKind::DaRl => {
            let table = require(input.table, "a trained Q table", policy)?;
            let ens = require(input.ensemble, "a posterior ensemble", policy)?;
            let state = PatientState {
                class: input.class,
                grades: input.estimated_grades[..c].to_vec(),
            };
            let report = plan_dose(table, ens, &state, &settings.darl, rng)?;
            (report.dose_mg, serde_json::to_value(&report)?)
        }
    };
    if !dose_mg.is_finite() || dose_mg < 0.0 {
        return Err(Error::Domain(format!("policy {policy} proposed dose {dose_mg}")));
    }
    Ok(Decision {
        policy,
        dose_mg,
        dose_per_m2: dose_mg / bsa,
        report,
        map_estimate,
    })
}
