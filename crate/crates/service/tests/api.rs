use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use mipd_core::cohort::{ClassBins, DECISION_STATES_PER_CLASS};
use mipd_core::pkpd::model::{PatientCovariates, PopulationModel};
use mipd_core::pkpd::system::idx;
use mipd_core::planner::table::{QTable, Slab};
use mipd_core::policies::DoseGrid;
use mipd_service::session::replay;
use mipd_service::store::Store;
use mipd_service::{router, AppState, ServiceConfig};

const CYCLE: f64 = 504.0;

struct Fixture {
    app: Arc<AppState>,
    dir: tempfile::TempDir,
}

fn config(dir: &std::path::Path) -> ServiceConfig {
    let mut c = ServiceConfig {
        data_dir: dir.to_path_buf(),
        ..ServiceConfig::default()
    };
    c.settings.darl.episodes = 60;
    c
}

fn fixture(table: Option<QTable>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::with_table(PopulationModel::default(), &config(dir.path()), table.map(Arc::new)).unwrap();
    Fixture { app: Arc::new(app), dir }
}

async fn call(app: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, v)
}

fn covariates(bsa: f64, anc0: f64) -> Value {
    json!({ "sex": 0, "age": 55.0, "bsa": bsa, "bili": 7.0, "anc0": anc0 })
}

async fn create(app: &Arc<AppState>, cov: Value, seed: u64) -> String {
    let (s, v) = call(app, "POST", "/v1/sessions", Some(json!({ "covariates": cov, "seed": seed }))).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

async fn event(app: &Arc<AppState>, id: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", &format!("/v1/sessions/{id}/events"), Some(body)).await
}

/// Table for one class whose root row prefers action `best`.
fn frozen_table(class: usize, best: usize) -> QTable {
    let n = DoseGrid::default().len();
    let mut slab = Slab::new(DECISION_STATES_PER_CLASS, n);
    for a in 0..n {
        slab.backup(0, a, if a == best { 0.9 } else { 0.1 + 0.01 * a as f64 });
    }
    let mut t = QTable::new(n, 1, json!({ "fixture": true }));
    t.insert(class, slab, 1).unwrap();
    t
}

fn class_of(cov: &Value) -> usize {
    let c: PatientCovariates = serde_json::from_value(cov.clone()).unwrap();
    ClassBins::default().class_of(&c).unwrap().index()
}

#[tokio::test]
async fn create_returns_id_and_persists() {
    let f = fixture(None);
    let (s, v) = call(&f.app, "POST", "/sessions", Some(json!({ "covariates": covariates(1.8, 4.0) }))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert!(uuid::Uuid::parse_str(v["id"].as_str().unwrap()).is_ok());
    assert_eq!(v["members"], 100);
    assert_eq!(v["next_cycle"], 0);
    let (s, got) = call(&f.app, "GET", &format!("/sessions/{}", v["id"].as_str().unwrap()), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(got, v);
}

#[tokio::test]
async fn anc0_below_inclusion_is_rejected_with_field() {
    let f = fixture(None);
    let (s, v) = call(&f.app, "POST", "/v1/sessions", Some(json!({ "covariates": covariates(1.8, 1.0) }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "anc0");
    assert!(v["error"].as_str().unwrap().contains("1.5"), "{v}");
}

#[tokio::test]
async fn different_seeds_give_different_persisted_ensembles() {
    let f = fixture(None);
    let a = create(&f.app, covariates(1.8, 4.0), 1).await;
    let b = create(&f.app, covariates(1.8, 4.0), 2).await;
    let store = Store::open(f.dir.path()).unwrap();
    assert_eq!(store.session_ids().unwrap().len(), 2);
    let sa = store.read_snapshot(&a).unwrap().unwrap();
    let sb = store.read_snapshot(&b).unwrap().unwrap();
    assert_ne!(sa.ensemble.ensemble.members, sb.ensemble.ensemble.members);
    assert_eq!(sa, f.app.snapshot(&a).unwrap());
}

#[tokio::test]
async fn dose_event_leaves_weights_unchanged() {
    let f = fixture(None);
    let id = create(&f.app, covariates(1.8, 4.0), 3).await;
    let before = f.app.snapshot(&id).unwrap().ensemble.ensemble.weights;
    let (s, v) = event(&f.app, &id, json!({ "type": "dose", "time": 0.0, "amount_mg": 360.0 })).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["next_cycle"], 1);
    assert_eq!(f.app.snapshot(&id).unwrap().ensemble.ensemble.weights, before);
}

/// With log-scale prior spread s and residual sd σ, the expected relative
/// ESS after observing the median is σ·√(σ²+2s²)/(σ²+s²).
#[tokio::test]
async fn median_observation_keeps_ess_high() {
    let f = fixture(None);
    let m = 400;
    let (s, v) = call(
        &f.app,
        "POST",
        "/v1/sessions",
        Some(json!({ "covariates": covariates(1.8, 4.0), "seed": 5, "members": m })),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    let id = v["id"].as_str().unwrap().to_string();
    event(&f.app, &id, json!({ "type": "dose", "time": 0.0, "amount_mg": 360.0 })).await;
    let t = 7.0 * 24.0;

    // Members land at the same place whatever the value, so a probe on a
    // copy gives the prior predictive.
    let mut probe = f.app.snapshot(&id).unwrap();
    let rec = mipd_service::session::EventRecord {
        seq: probe.last_seq + 1,
        request_id: None,
        event: mipd_service::session::Event::Observed {
            observation: mipd_core::pkpd::observe::Observation {
                time: t,
                value: 1.0,
                kind: mipd_core::pkpd::simulate::Observable::Neutrophils,
            },
        },
    };
    probe.apply(&rec).unwrap();
    let mut logs: Vec<f64> = probe.ensemble.ensemble.members.iter().map(|p| p.state[idx::CIRC].ln()).collect();
    logs.sort_by(f64::total_cmp);
    let median = ((logs[m / 2 - 1] + logs[m / 2]) / 2.0).exp();
    let mean = logs.iter().sum::<f64>() / m as f64;
    let spread = (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
    let sigma = PopulationModel::default().sigma_pd();
    let expected = sigma * (sigma * sigma + 2.0 * spread * spread).sqrt() / (sigma * sigma + spread * spread);

    let (s, v) = event(&f.app, &id, json!({ "type": "observation", "time": t, "value": median })).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let ess = v["ess"].as_f64().unwrap() / m as f64;
    assert!(expected > 0.5, "probe too informative: {expected}");
    assert!((ess - expected).abs() < 0.1, "ess {ess} expected {expected}");
}

#[tokio::test]
async fn out_of_order_events_conflict() {
    let f = fixture(None);
    let id = create(&f.app, covariates(1.8, 4.0), 6).await;
    event(&f.app, &id, json!({ "type": "dose", "time": 0.0, "amount_mg": 360.0 })).await;
    event(&f.app, &id, json!({ "type": "observation", "time": 264.0, "value": 2.0 })).await;
    let (s, _) = event(&f.app, &id, json!({ "type": "observation", "time": 200.0, "value": 2.0 })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = event(&f.app, &id, json!({ "type": "observation", "time": CYCLE + 24.0, "value": 2.0 })).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, v) = event(&f.app, &id, json!({ "type": "dose", "time": 300.0, "amount_mg": 360.0 })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "time");
    let (s, _) = call(&f.app, "GET", "/v1/sessions/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn retried_request_ids_are_idempotent() {
    let f = fixture(None);
    let body = json!({ "covariates": covariates(1.8, 4.0), "request_id": "c-1" });
    let (s1, a) = call(&f.app, "POST", "/v1/sessions", Some(body.clone())).await;
    let (s2, b) = call(&f.app, "POST", "/v1/sessions", Some(body)).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::OK));
    assert_eq!(a["id"], b["id"]);
    let id = a["id"].as_str().unwrap();
    let dose = json!({ "type": "dose", "time": 0.0, "amount_mg": 360.0, "request_id": "d-1" });
    let (s1, a) = event(&f.app, id, dose.clone()).await;
    let (s2, b) = event(&f.app, id, dose).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::OK));
    assert_eq!(a, b);
    assert_eq!(b["doses"].as_array().unwrap().len(), 1);
    let uri = format!("/v1/sessions/{id}/recommendation?policy=standard&request_id=r-1");
    let (_, r1) = call(&f.app, "GET", &uri, None).await;
    let (_, r2) = call(&f.app, "GET", &uri, None).await;
    assert_eq!(r1, r2);
    assert_eq!(f.app.snapshot(id).unwrap().recommendations.len(), 1);
}

#[tokio::test]
async fn replay_reproduces_state_and_reload() {
    let f = fixture(None);
    let id = create(&f.app, covariates(1.8, 4.0), 7).await;
    event(&f.app, &id, json!({ "type": "dose", "time": 0.0, "amount_mg": 360.0 })).await;
    for (t, v) in [(264.0, 1.1), (360.0, 2.5)] {
        event(&f.app, &id, json!({ "type": "observation", "time": t, "value": v })).await;
    }
    event(&f.app, &id, json!({ "type": "dose", "time": CYCLE, "amount_mg": 300.0 })).await;
    event(&f.app, &id, json!({ "type": "observation", "time": CYCLE + 264.0, "value": 0.9 })).await;
    let live = f.app.snapshot(&id).unwrap();
    assert_eq!(live.estimates.len(), 1);

    let store = Store::open(f.dir.path()).unwrap();
    let replayed = replay(&id, &store.events(&id).unwrap(), &PopulationModel::default()).unwrap();
    assert_eq!(replayed, live);
    let restarted = AppState::with_table(PopulationModel::default(), &config(f.dir.path()), None).unwrap();
    assert_eq!(restarted.snapshot(&id).unwrap(), live);
}

#[tokio::test]
async fn standard_first_cycle_dose() {
    let f = fixture(None);
    let id = create(&f.app, covariates(1.8, 4.0), 8).await;
    let (s, v) = call(&f.app, "GET", &format!("/sessions/{id}/recommendation?policy=standard"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert!((v["dose_mg"].as_f64().unwrap() - 200.0 * 1.8).abs() < 1e-9);
    assert_eq!(v["cycle"], 0);
    assert!(v["report"]["rule"].as_str().unwrap().contains("200"));
    let (s, v) = call(&f.app, "GET", &format!("/sessions/{id}/recommendation?policy=bogus"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "policy");
}

#[tokio::test]
async fn rl_needs_table_and_echoes_argmax() {
    let cov = covariates(1.8, 4.0);
    let f = fixture(None);
    let id = create(&f.app, cov.clone(), 9).await;
    let (s, _) = call(&f.app, "GET", &format!("/v1/sessions/{id}/recommendation?policy=rl"), None).await;
    assert_eq!(s, StatusCode::FAILED_DEPENDENCY);

    let best = 17;
    let f = fixture(Some(frozen_table(class_of(&cov), best)));
    let id = create(&f.app, cov.clone(), 9).await;
    let (s, v) = call(&f.app, "GET", &format!("/v1/sessions/{id}/recommendation?policy=rl"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["report"]["action"], best);
    let per_m2 = DoseGrid::default().level(best);
    assert!((v["dose_mg"].as_f64().unwrap() - per_m2 * 1.8).abs() < 1e-9);
    assert_eq!(v["report"]["q"][best], 0.9);

    let (s, row) = call(&f.app, "GET", &format!("/v1/qtables/{}/row?state=", class_of(&cov)), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(row["greedy"], best);
    let (s, _) = call(&f.app, "GET", &format!("/qtables/{}/row?state=0,9", class_of(&cov)), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn da_rl_is_deterministic_for_a_seed() {
    let cov = covariates(1.8, 4.0);
    let f = fixture(Some(frozen_table(class_of(&cov), 20)));
    let mut out = Vec::new();
    for _ in 0..2 {
        let id = create(&f.app, cov.clone(), 10).await;
        event(&f.app, &id, json!({ "type": "dose", "time": 0.0, "amount_mg": 360.0 })).await;
        event(&f.app, &id, json!({ "type": "observation", "time": 264.0, "value": 0.8 })).await;
        let (s, v) = call(&f.app, "GET", &format!("/v1/sessions/{id}/recommendation?policy=da-rl"), None).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        assert_eq!(v["cycle"], 1);
        out.push((v["dose_mg"].clone(), v["report"].clone()));
    }
    assert_eq!(out[0], out[1]);
    assert!(out[0].1["visits"].is_array());
    assert!(out[0].1["prior"].is_array());
}

#[tokio::test]
async fn whatif_probabilities_and_bounds() {
    let f = fixture(None);
    let id = create(&f.app, covariates(1.8, 4.0), 11).await;
    let before = f.app.snapshot(&id).unwrap();
    let (s, v) = call(&f.app, "GET", &format!("/v1/sessions/{id}/whatif?dose=360"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let p: Vec<f64> = serde_json::from_value(v["grade_probabilities"].clone()).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(v["anc_bands"].as_array().unwrap().len(), 22);
    assert!(v["nadir"]["p05"].as_f64().unwrap() <= v["nadir"]["p95"].as_f64().unwrap());
    assert_eq!(f.app.snapshot(&id).unwrap(), before);

    let (s, v) = call(&f.app, "GET", &format!("/v1/sessions/{id}/whatif?dose={}", 251.0 * 1.8), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["field"], "dose");
    let (s, _) = call(&f.app, "GET", &format!("/v1/sessions/{id}/whatif?dose=0"), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn drug_free_whatif_has_no_neutropenia() {
    let f = fixture(None);
    let id = create(&f.app, covariates(1.8, 20.0), 12).await;
    let (s, v) = call(&f.app, "GET", &format!("/v1/sessions/{id}/whatif?dose=0&admin=true"), None).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let p: Vec<f64> = serde_json::from_value(v["grade_probabilities"].clone()).unwrap();
    assert!((p[0] - 1.0).abs() < 1e-12, "{p:?}");
    assert!(p[1..].iter().all(|&x| x == 0.0), "{p:?}");
}

#[tokio::test]
async fn grade4_risk_grows_with_dose() {
    let f = fixture(None);
    let id = create(&f.app, covariates(1.8, 2.0), 13).await;
    let mut last = 0.0;
    for per_m2 in [60.0, 120.0, 175.0, 210.0, 250.0] {
        let (s, v) = call(&f.app, "GET", &format!("/v1/sessions/{id}/whatif?dose={}", per_m2 * 1.8), None).await;
        assert_eq!(s, StatusCode::OK);
        let p4 = v["grade_probabilities"][4].as_f64().unwrap();
        assert!(p4 >= last, "P(grade 4) fell from {last} to {p4} at {per_m2} mg/m²");
        last = p4;
    }
    assert!(last > 0.0);
}
