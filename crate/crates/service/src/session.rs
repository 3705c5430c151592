//! Session state as a fold over its event log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use mipd_core::cohort::{ClassBins, CovariateClass, Grade, GradeScale, MAX_CYCLES};
use mipd_core::darl::{estimate_grade, StateEstimate};
use mipd_core::harness::Decision;
use mipd_core::harness::PolicyKind;
use mipd_core::inference::{FilterConfig, PatientEnsemble};
use mipd_core::pkpd::model::{PatientCovariates, PopulationModel};
use mipd_core::pkpd::observe::Observation;
use mipd_core::pkpd::simulate::{Dose, Observable};
use mipd_core::rng::{substream, tag};

use crate::error::{ServiceError, ServiceResult};

pub const SCHEMA_VERSION: u32 = 1;
const TIME_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Created {
        covariates: PatientCovariates,
        seed: u64,
        members: usize,
        schema_version: u32,
    },
    DoseGiven {
        dose: Dose,
    },
    Observed {
        observation: Observation,
    },
    Recommended {
        cycle: usize,
        decision: Decision,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_id: Option<String>,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationEntry {
    pub seq: u64,
    pub cycle: usize,
    pub policy: PolicyKind,
    pub dose_mg: f64,
    pub dose_per_m2: f64,
    pub report: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub schema_version: u32,
    pub covariates: PatientCovariates,
    pub class: CovariateClass,
    pub seed: u64,
    pub doses: Vec<Dose>,
    pub observations: Vec<Observation>,
    pub ensemble: PatientEnsemble,
    /// Posterior grade estimates (expected nadir, most probable grade) of
    /// each completed cycle, fixed when the ensemble left the cycle.
    pub estimates: Vec<[Grade; 2]>,
    pub recommendations: Vec<RecommendationEntry>,
    pub warnings: Vec<String>,
    pub last_seq: u64,
    pub last_event_time: f64,
    pub request_ids: BTreeMap<String, u64>,
}

/// Checks covariates, including the class ranges used for inclusion.
pub fn validate_covariates(cov: &PatientCovariates, bins: &ClassBins) -> ServiceResult<CovariateClass> {
    cov.validate()?;
    Ok(bins.class_of(cov)?)
}

impl SessionState {
    /// Initial state from the creation record.
    pub fn create(id: &str, record: &EventRecord, model: &PopulationModel) -> ServiceResult<Self> {
        let Event::Created {
            covariates,
            seed,
            members,
            schema_version,
        } = &record.event
        else {
            return Err(ServiceError::validation("event", "log must start with a creation event"));
        };
        if *schema_version != SCHEMA_VERSION {
            return Err(ServiceError::validation("schema_version", format!("unsupported version {schema_version}")));
        }
        if *members == 0 {
            return Err(ServiceError::validation("members", "need at least one member"));
        }
        let class = validate_covariates(covariates, &ClassBins::default())?;
        let config = FilterConfig {
            members: *members,
            ..FilterConfig::default()
        };
        let mut rng = substream(*seed, &[tag::COHORT]);
        let ensemble = PatientEnsemble::from_prior(model, *covariates, config, &mut rng)?;
        let mut request_ids = BTreeMap::new();
        if let Some(r) = &record.request_id {
            request_ids.insert(r.clone(), record.seq);
        }
        Ok(Self {
            id: id.to_string(),
            schema_version: *schema_version,
            covariates: *covariates,
            class,
            seed: *seed,
            doses: Vec::new(),
            observations: Vec::new(),
            ensemble,
            estimates: Vec::new(),
            recommendations: Vec::new(),
            warnings: Vec::new(),
            last_seq: record.seq,
            last_event_time: 0.0,
            request_ids,
        })
    }

    pub fn cycle_length(&self) -> f64 {
        self.ensemble.context.cycle_length
    }

    /// Cycle the next dose belongs to.
    pub fn next_cycle(&self) -> usize {
        self.doses.len()
    }

    /// Applies one event; the state is unchanged on error.
    pub fn apply(&mut self, record: &EventRecord) -> ServiceResult<()> {
        if record.seq != self.last_seq + 1 {
            return Err(ServiceError::OutOfOrder(format!(
                "event {} follows {}",
                record.seq, self.last_seq
            )));
        }
        let mut next = self.clone();
        next.apply_inner(record)?;
        next.last_seq = record.seq;
        if let Some(r) = &record.request_id {
            next.request_ids.insert(r.clone(), record.seq);
        }
        *self = next;
        Ok(())
    }

    fn apply_inner(&mut self, record: &EventRecord) -> ServiceResult<()> {
        let mut rng = substream(self.seed, &[tag::FILTER, record.seq]);
        let len = self.cycle_length();
        match &record.event {
            Event::Created { .. } => Err(ServiceError::OutOfOrder("session already created".into())),
            Event::DoseGiven { dose } => {
                self.check_time(dose.time)?;
                let c = self.next_cycle();
                if c >= MAX_CYCLES {
                    return Err(ServiceError::validation("time", "all cycles have been dosed"));
                }
                if (dose.time - c as f64 * len).abs() > TIME_EPS {
                    return Err(ServiceError::validation(
                        "time",
                        format!("dose for cycle {} must start at {} h", c + 1, c as f64 * len),
                    ));
                }
                if !(dose.amount_mg.is_finite() && dose.amount_mg >= 0.0 && dose.duration > 0.0) {
                    return Err(ServiceError::validation("amount_mg", "dose must be ≥ 0 mg with positive duration"));
                }
                self.advance_with_estimates(dose.time, true, &mut rng)?;
                self.ensemble.add_dose(*dose)?;
                self.doses.push(*dose);
                self.last_event_time = dose.time;
                Ok(())
            }
            Event::Observed { observation } => {
                let o = observation;
                self.check_time(o.time)?;
                if !(o.time > 0.0) {
                    return Err(ServiceError::validation("time", "the baseline count is the ANC0 covariate"));
                }
                if !(o.value.is_finite() && o.value > 0.0) {
                    return Err(ServiceError::validation("value", "observations must be positive"));
                }
                if o.time > self.next_cycle() as f64 * len + TIME_EPS {
                    return Err(ServiceError::OutOfOrder(format!(
                        "observation at {} h falls after the start of cycle {}, which has no dose yet",
                        o.time,
                        self.next_cycle() + 1
                    )));
                }
                self.advance_with_estimates(o.time, false, &mut rng)?;
                match self.ensemble.assimilate(o, &mut rng) {
                    Ok(_) => {}
                    Err(mipd_core::Error::DegenerateUpdate) => self.warnings.push(format!(
                        "degenerate update at {} h: observation {} ignored, prior weights kept",
                        o.time, o.value
                    )),
                    Err(e) => return Err(e.into()),
                }
                self.advance_with_estimates(o.time, true, &mut rng)?;
                self.observations.push(*o);
                self.last_event_time = o.time;
                Ok(())
            }
            Event::Recommended { cycle, decision } => {
                self.recommendations.push(RecommendationEntry {
                    seq: record.seq,
                    cycle: *cycle,
                    policy: decision.policy,
                    dose_mg: decision.dose_mg,
                    dose_per_m2: decision.dose_per_m2,
                    report: decision.report.clone(),
                });
                Ok(())
            }
        }
    }

    fn check_time(&self, t: f64) -> ServiceResult<()> {
        if !t.is_finite() || t < self.last_event_time - TIME_EPS {
            return Err(ServiceError::OutOfOrder(format!(
                "event at {t} h precedes the last event at {} h",
                self.last_event_time
            )));
        }
        Ok(())
    }

    /// Moves the ensemble to `t`, fixing the grade estimate of every cycle
    /// it leaves. A cycle ending exactly at `t` is closed only if `inclusive`.
    fn advance_with_estimates(&mut self, t: f64, inclusive: bool, rng: &mut mipd_core::rng::SimRng) -> ServiceResult<()> {
        let len = self.cycle_length();
        let scale = GradeScale::default();
        loop {
            let k = self.estimates.len();
            let boundary = (k + 1) as f64 * len;
            let crosses = if inclusive {
                boundary <= t + TIME_EPS
            } else {
                boundary < t - TIME_EPS
            };
            if !crosses || k >= self.doses.len() {
                break;
            }
            self.ensemble.advance_to(boundary, rng)?;
            let nadirs = self.ensemble.member_nadirs(k)?;
            let w = self.ensemble.weights();
            self.estimates.push([
                estimate_grade(w, &nadirs, StateEstimate::ExpectedNadir, &scale),
                estimate_grade(w, &nadirs, StateEstimate::MapGrade, &scale),
            ]);
        }
        if t > self.ensemble.time() + TIME_EPS {
            self.ensemble.advance_to(t, rng)?;
        }
        Ok(())
    }

    /// Copy of the state moved to the start of the next cycle, ready for a
    /// decision. The stored state is not touched.
    pub fn at_next_cycle_start(&self) -> ServiceResult<SessionState> {
        let c = self.next_cycle();
        if c >= MAX_CYCLES {
            return Err(mipd_core::Error::LeafState.into());
        }
        let mut s = self.clone();
        let mut rng = substream(self.seed, &[tag::POLICY, c as u64, self.last_seq]);
        s.advance_with_estimates(c as f64 * self.cycle_length(), true, &mut rng)?;
        Ok(s)
    }

    /// Grade of the lowest ANC observation in each completed cycle, falling
    /// back to the expected-nadir estimate when the cycle has none.
    pub fn reported_grades(&self) -> Vec<Grade> {
        let len = self.cycle_length();
        let scale = GradeScale::default();
        (0..self.estimates.len())
            .map(|c| {
                let (a, b) = (c as f64 * len, (c + 1) as f64 * len);
                let low = self
                    .observations
                    .iter()
                    .filter(|o| o.kind == Observable::Neutrophils && o.time > a + TIME_EPS && o.time <= b + TIME_EPS)
                    .map(|o| o.value)
                    .fold(f64::INFINITY, f64::min);
                if low.is_finite() {
                    scale.grade_unchecked(low)
                } else {
                    self.estimates[c][0]
                }
            })
            .collect()
    }

    pub fn estimated_grades(&self, mode: StateEstimate) -> Vec<Grade> {
        let i = match mode {
            StateEstimate::ExpectedNadir => 0,
            StateEstimate::MapGrade => 1,
        };
        self.estimates.iter().map(|e| e[i]).collect()
    }
}

/// Folds a whole event log.
pub fn replay(id: &str, records: &[EventRecord], model: &PopulationModel) -> ServiceResult<SessionState> {
    let (first, rest) = records
        .split_first()
        .ok_or_else(|| ServiceError::validation("events", "empty event log"))?;
    let mut state = SessionState::create(id, first, model)?;
    for r in rest {
        state.apply(r)?;
    }
    Ok(state)
}
