//! HTTP routes and the shared application state.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use mipd_core::cohort::{CovariateClass, Grade, PatientState, N_GRADES};
use mipd_core::darl::StateEstimate;
use mipd_core::harness::metrics::Band;
use mipd_core::harness::{decide, DecisionInput, PolicyKind, PolicySettings};
use mipd_core::inference::patient::grade_probabilities;
use mipd_core::pkpd::model::{PatientCovariates, PopulationModel};
use mipd_core::pkpd::observe::Observation;
use mipd_core::pkpd::simulate::{Dose, Observable, Simulator, DEFAULT_INFUSION_HOURS};
use mipd_core::planner::greedy_action;
use mipd_core::planner::table::QTable;
use mipd_core::rng::{substream, tag};

use crate::error::{ServiceError, ServiceResult};
use crate::session::{Event, EventRecord, RecommendationEntry, SessionState, SCHEMA_VERSION};
use crate::store::Store;

/// Ensemble size of new sessions.
pub const DEFAULT_MEMBERS: usize = 100;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub qtable: Option<PathBuf>,
    pub bind: String,
    pub port: u16,
    pub members: usize,
    pub settings: PolicySettings,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("mipd-data"),
            qtable: None,
            bind: "127.0.0.1".into(),
            port: 8080,
            members: DEFAULT_MEMBERS,
            settings: PolicySettings::default(),
        }
    }
}

impl ServiceConfig {
    /// Reads `MIPD_DATA_DIR`, `MIPD_QTABLE`, `MIPD_BIND` and `MIPD_PORT`.
    pub fn from_env() -> ServiceResult<Self> {
        let mut c = Self::default();
        if let Ok(v) = std::env::var("MIPD_DATA_DIR") {
            c.data_dir = v.into();
        }
        if let Ok(v) = std::env::var("MIPD_QTABLE") {
            c.qtable = Some(v.into());
        }
        if let Ok(v) = std::env::var("MIPD_BIND") {
            c.bind = v;
        }
        if let Ok(v) = std::env::var("MIPD_PORT") {
            c.port = v
                .parse()
                .map_err(|_| ServiceError::validation("MIPD_PORT", format!("'{v}' is not a port")))?;
        }
        Ok(c)
    }
}

pub struct AppState {
    pub model: PopulationModel,
    pub settings: PolicySettings,
    pub table: Option<Arc<QTable>>,
    pub store: Store,
    pub members: usize,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionState>>>>,
    created: Mutex<HashMap<String, String>>,
}

impl AppState {
    /// Opens the data directory and reloads every stored session.
    pub fn new(model: PopulationModel, config: &ServiceConfig) -> ServiceResult<Self> {
        let table = match &config.qtable {
            Some(p) => Some(Arc::new(QTable::load(p)?)),
            None => None,
        };
        Self::with_table(model, config, table)
    }

    pub fn with_table(model: PopulationModel, config: &ServiceConfig, table: Option<Arc<QTable>>) -> ServiceResult<Self> {
        let store = Store::open(&config.data_dir)?;
        let mut sessions = HashMap::new();
        let mut created = HashMap::new();
        for id in store.session_ids()? {
            let state = store.load(&id, &model)?;
            if let Some(rid) = store.events(&id)?.first().and_then(|r| r.request_id.clone()) {
                created.insert(rid, id.clone());
            }
            sessions.insert(id, Arc::new(Mutex::new(state)));
        }
        Ok(Self {
            model,
            settings: config.settings.clone(),
            table,
            store,
            members: config.members,
            sessions: RwLock::new(sessions),
            created: Mutex::new(created),
        })
    }

    fn session(&self, id: &str) -> ServiceResult<Arc<Mutex<SessionState>>> {
        self.sessions
            .read()
            .map_err(poisoned)?
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(id.to_string()))
    }

    /// Copy of the current session state.
    pub fn snapshot(&self, id: &str) -> ServiceResult<SessionState> {
        Ok(self.session(id)?.lock().map_err(poisoned)?.clone())
    }

    pub fn create_session(&self, req: CreateRequest) -> ServiceResult<(bool, SessionSummary)> {
        let mut created = self.created.lock().map_err(poisoned)?;
        if let Some(rid) = &req.request_id {
            if let Some(id) = created.get(rid) {
                return Ok((false, self.snapshot(id)?.summary()));
            }
        }
        let uuid = uuid::Uuid::new_v4();
        let id = uuid.to_string();
        let seed = req
            .seed
            .unwrap_or_else(|| u64::from_le_bytes(uuid.as_bytes()[..8].try_into().unwrap()));
        let record = EventRecord {
            seq: 0,
            request_id: req.request_id.clone(),
            event: Event::Created {
                covariates: req.covariates,
                seed,
                members: req.members.unwrap_or(self.members),
                schema_version: SCHEMA_VERSION,
            },
        };
        let state = SessionState::create(&id, &record, &self.model)?;
        self.store.append(&id, &record)?;
        self.store.write_snapshot(&state)?;
        let summary = state.summary();
        self.sessions
            .write()
            .map_err(poisoned)?
            .insert(id.clone(), Arc::new(Mutex::new(state)));
        if let Some(rid) = req.request_id {
            created.insert(rid, id);
        }
        Ok((true, summary))
    }

    /// Appends one clinical event. Returns `false` for a retried request id.
    pub fn record(&self, id: &str, req: EventRequest) -> ServiceResult<(bool, SessionSummary)> {
        let session = self.session(id)?;
        let mut state = session.lock().map_err(poisoned)?;
        if let Some(rid) = &req.request_id {
            if state.request_ids.contains_key(rid) {
                return Ok((false, state.summary()));
            }
        }
        let event = match req.event {
            EventInput::Dose {
                time,
                amount_mg,
                duration,
            } => Event::DoseGiven {
                dose: Dose {
                    time,
                    amount_mg,
                    duration: duration.unwrap_or(DEFAULT_INFUSION_HOURS),
                },
            },
            EventInput::Observation { time, value, kind } => Event::Observed {
                observation: Observation {
                    time,
                    value,
                    kind: kind.unwrap_or(Observable::Neutrophils),
                },
            },
        };
        let record = EventRecord {
            seq: state.last_seq + 1,
            request_id: req.request_id,
            event,
        };
        let mut next = state.clone();
        next.apply(&record)?;
        self.store.append(id, &record)?;
        if matches!(record.event, Event::DoseGiven { .. }) {
            self.store.write_snapshot(&next)?;
        }
        *state = next;
        Ok((true, state.summary()))
    }

    /// Computes a recommendation on a copy of the session and logs it.
    pub fn recommend(&self, id: &str, policy: PolicyKind, request_id: Option<String>) -> ServiceResult<RecommendationEntry> {
        let session = self.session(id)?;
        let snapshot = {
            let state = session.lock().map_err(poisoned)?;
            if let Some(rid) = &request_id {
                if let Some(&seq) = state.request_ids.get(rid) {
                    return state
                        .recommendations
                        .iter()
                        .find(|r| r.seq == seq)
                        .cloned()
                        .ok_or_else(|| ServiceError::validation("request_id", "already used by a different request"));
                }
            }
            state.clone()
        };
        let decision = self.decide(&snapshot, policy)?;
        let mut state = session.lock().map_err(poisoned)?;
        if state.last_seq != snapshot.last_seq {
            return Err(ServiceError::OutOfOrder(
                "session changed while the recommendation was computed; retry".into(),
            ));
        }
        let record = EventRecord {
            seq: state.last_seq + 1,
            request_id,
            event: Event::Recommended {
                cycle: snapshot.next_cycle(),
                decision,
            },
        };
        let mut next = state.clone();
        next.apply(&record)?;
        self.store.append(id, &record)?;
        *state = next;
        Ok(state.recommendations.last().cloned().expect("just recorded"))
    }

    fn decide(&self, state: &SessionState, policy: PolicyKind) -> ServiceResult<mipd_core::harness::Decision> {
        let at = state.at_next_cycle_start()?;
        let c = at.next_cycle();
        let grades = at.reported_grades();
        let estimated = at.estimated_grades(self.settings.darl.mode);
        let input = DecisionInput {
            model: &self.model,
            covariates: &at.covariates,
            class: at.class,
            cycle: c,
            cycle_length: at.cycle_length(),
            doses: &at.doses,
            observations: &at.observations,
            grades: &grades,
            estimated_grades: &estimated,
            ensemble: Some(&at.ensemble),
            table: self.table.as_deref(),
            map_warm_start: None,
        };
        let mut rng = substream(state.seed, &[tag::POLICY, c as u64, state.last_seq]);
        Ok(decide(policy, &self.settings, &input, &mut rng)?)
    }

    /// Weighted member simulation of the next cycle under `dose_mg`.
    pub fn whatif(&self, id: &str, dose_mg: f64, admin: bool) -> ServiceResult<WhatIf> {
        let state = self.snapshot(id)?;
        let bsa = state.covariates.bsa;
        let (lo, hi) = self.settings.grid.bounds_mg(bsa);
        if !dose_mg.is_finite() || dose_mg < 0.0 {
            return Err(ServiceError::validation("dose", "dose must be a finite amount ≥ 0 mg"));
        }
        if !admin && !(dose_mg >= lo - 1e-9 && dose_mg <= hi + 1e-9) {
            return Err(ServiceError::validation(
                "dose",
                format!("{dose_mg} mg outside [{lo:.1}, {hi:.1}] mg for BSA {bsa} m²"),
            ));
        }
        let at = state.at_next_cycle_start()?;
        let c = at.next_cycle();
        let mut rng = substream(state.seed, &[tag::POLICY, c as u64, state.last_seq, 1]);
        let members = at.ensemble.predictive(&mut rng)?;
        let sim = Simulator::<f64>::new(self.settings.planning_solver);
        let runs = members
            .iter()
            .map(|m| m.simulate(&sim, &self.model, dose_mg, true))
            .collect::<mipd_core::Result<Vec<_>>>()?;
        let weights: Vec<f64> = members.iter().map(|m| m.weight).collect();
        let nadirs: Vec<f64> = runs.iter().map(|r| r.nadir).collect();
        let grades: Vec<Grade> = nadirs.iter().map(|&n| self.settings.scale.grade_unchecked(n)).collect();
        let start = c as f64 * at.cycle_length();
        // circ is sampled hourly; keep one value per day.
        let days = runs[0].circ.len().saturating_sub(1) / 24;
        let anc_bands = (0..=days)
            .map(|d| {
                let v: Vec<f64> = runs.iter().map(|r| r.circ[d * 24]).collect();
                DayBand {
                    day: d,
                    time: start + d as f64 * 24.0,
                    band: Band::weighted(&v, &weights),
                }
            })
            .collect();
        Ok(WhatIf {
            cycle: c,
            dose_mg,
            dose_per_m2: dose_mg / bsa,
            expected_nadir: nadirs.iter().zip(&weights).map(|(n, w)| n * w).sum(),
            nadir: Band::weighted(&nadirs, &weights),
            grade_probabilities: grade_probabilities(&weights, &grades),
            anc_bands,
            ess: at.ensemble.ess(),
        })
    }

    pub fn qtable_row(&self, class: usize, grades: Vec<Grade>) -> ServiceResult<QRow> {
        let table = self
            .table
            .as_deref()
            .ok_or_else(|| ServiceError::MissingPrerequisite("no Q table loaded".into()))?;
        let class = CovariateClass::from_index(class).map_err(|e| ServiceError::validation("class", e.to_string()))?;
        let state = PatientState { class, grades };
        let (slab, row) = table.locate(&state)?;
        let greedy = greedy_action(table, &state).ok().map(|g| g.action);
        Ok(QRow {
            class: class.index(),
            grades: state.grades.clone(),
            doses_per_m2: self.settings.grid.levels(),
            q: slab.q_row(row).to_vec(),
            visits: slab.n_row(row).to_vec(),
            greedy,
        })
    }
}

fn poisoned<T>(_: T) -> ServiceError {
    ServiceError::Internal("lock poisoned".into())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    pub covariates: PatientCovariates,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub members: Option<usize>,
    #[serde(default)]
    pub request_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventInput {
    /// Infusion start `time` in h since the first dose, amount in mg.
    Dose {
        time: f64,
        amount_mg: f64,
        #[serde(default)]
        duration: Option<f64>,
    },
    /// ANC in 10⁹/L or drug concentration in µM.
    Observation {
        time: f64,
        value: f64,
        #[serde(default)]
        kind: Option<Observable>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventRequest {
    #[serde(default)]
    pub request_id: Option<String>,
    #[serde(flatten)]
    pub event: EventInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub schema_version: u32,
    pub seed: u64,
    pub covariates: PatientCovariates,
    pub class: usize,
    pub members: usize,
    /// 0-based cycle of the next dose.
    pub next_cycle: usize,
    pub time: f64,
    pub ess: f64,
    pub doses: Vec<Dose>,
    pub observations: Vec<Observation>,
    pub reported_grades: Vec<Grade>,
    pub expected_nadir_grades: Vec<Grade>,
    pub map_grades: Vec<Grade>,
    pub recommendations: Vec<RecommendationEntry>,
    pub warnings: Vec<String>,
    pub last_seq: u64,
}

impl SessionState {
    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            id: self.id.clone(),
            schema_version: self.schema_version,
            seed: self.seed,
            covariates: self.covariates,
            class: self.class.index(),
            members: self.ensemble.len(),
            next_cycle: self.next_cycle(),
            time: self.ensemble.time(),
            ess: self.ensemble.ess(),
            doses: self.doses.clone(),
            observations: self.observations.clone(),
            reported_grades: self.reported_grades(),
            expected_nadir_grades: self.estimated_grades(StateEstimate::ExpectedNadir),
            map_grades: self.estimated_grades(StateEstimate::MapGrade),
            recommendations: self.recommendations.clone(),
            warnings: self.warnings.clone(),
            last_seq: self.last_seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayBand {
    pub day: usize,
    pub time: f64,
    #[serde(flatten)]
    pub band: Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub cycle: usize,
    pub dose_mg: f64,
    pub dose_per_m2: f64,
    pub expected_nadir: f64,
    pub nadir: Band,
    pub grade_probabilities: [f64; N_GRADES],
    pub anc_bands: Vec<DayBand>,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QRow {
    pub class: usize,
    pub grades: Vec<Grade>,
    pub doses_per_m2: Vec<f64>,
    pub q: Vec<f64>,
    pub visits: Vec<u32>,
    pub greedy: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct RecommendQuery {
    policy: String,
    request_id: Option<String>,
}

#[derive(Debug, Deserialize)]
struct WhatIfQuery {
    dose: f64,
    #[serde(default)]
    admin: bool,
}

#[derive(Debug, Deserialize)]
struct RowQuery {
    #[serde(default)]
    state: String,
}

type Shared = Arc<AppState>;

async fn blocking<T, F>(f: F) -> ServiceResult<T>
where
    F: FnOnce() -> ServiceResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn created(fresh: bool) -> StatusCode {
    if fresh {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    }
}

async fn create_session(
    State(app): State<Shared>,
    Json(req): Json<CreateRequest>,
) -> ServiceResult<(StatusCode, Json<SessionSummary>)> {
    let (fresh, s) = blocking(move || app.create_session(req)).await?;
    Ok((created(fresh), Json(s)))
}

async fn post_event(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<EventRequest>,
) -> ServiceResult<(StatusCode, Json<SessionSummary>)> {
    let (fresh, s) = blocking(move || app.record(&id, req)).await?;
    Ok((created(fresh), Json(s)))
}

async fn get_session(State(app): State<Shared>, Path(id): Path<String>) -> ServiceResult<Json<SessionSummary>> {
    Ok(Json(app.snapshot(&id)?.summary()))
}

async fn get_recommendation(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<RecommendQuery>,
) -> ServiceResult<Json<RecommendationEntry>> {
    let policy: PolicyKind = q
        .policy
        .parse()
        .map_err(|e: mipd_core::Error| ServiceError::validation("policy", e.to_string()))?;
    Ok(Json(blocking(move || app.recommend(&id, policy, q.request_id)).await?))
}

async fn get_whatif(
    State(app): State<Shared>,
    Path(id): Path<String>,
    Query(q): Query<WhatIfQuery>,
) -> ServiceResult<Json<WhatIf>> {
    Ok(Json(blocking(move || app.whatif(&id, q.dose, q.admin)).await?))
}

/// `state` lists the grade history, e.g. `0,2`; empty for the first cycle.
pub fn parse_grades(s: &str) -> ServiceResult<Vec<Grade>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| match t.parse::<Grade>() {
            Ok(g) if (g as usize) < N_GRADES => Ok(g),
            _ => Err(ServiceError::validation("state", format!("'{t}' is not a grade 0..4"))),
        })
        .collect()
}

async fn get_qtable_row(
    State(app): State<Shared>,
    Path(class): Path<usize>,
    Query(q): Query<RowQuery>,
) -> ServiceResult<Json<QRow>> {
    let grades = parse_grades(&q.state)?;
    Ok(Json(app.qtable_row(class, grades)?))
}

fn routes() -> Router<Shared> {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/events", post(post_event))
        .route("/sessions/{id}/recommendation", get(get_recommendation))
        .route("/sessions/{id}/whatif", get(get_whatif))
        .route("/qtables/{class}/row", get(get_qtable_row))
}

/// Every route, unprefixed and under `/v1`.
pub fn router(app: Shared) -> Router {
    Router::new().merge(routes()).nest("/v1", routes()).with_state(app)
}
