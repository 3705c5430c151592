use mipd_core::cohort::{Grade, MAX_CYCLES};
use mipd_core::harness::export::write_all;
use mipd_core::harness::{run_trial, PolicyKind, TrialConfig};
use mipd_core::pkpd::model::PopulationModel;
use mipd_core::planner::{train_classes, PlannerConfig, QTable};
use mipd_core::policies::DoseGrid;

const CLASS: usize = 5;

fn small_table() -> QTable {
    let config = PlannerConfig {
        episodes: 200,
        ..PlannerConfig::default()
    };
    train_classes(&PopulationModel::default(), &config, &[CLASS], 4).unwrap()
}

fn config(policy: PolicyKind) -> TrialConfig {
    let mut c = TrialConfig {
        policy,
        patients: 2,
        seed: 31,
        classes: Some(vec![CLASS]),
        ..TrialConfig::default()
    };
    c.settings.darl.episodes = 40;
    c
}

#[test]
fn every_policy_completes_six_cycles() {
    let model = PopulationModel::default();
    let table = small_table();
    let grid = DoseGrid::default();
    for policy in PolicyKind::ALL {
        let r = run_trial(&model, &config(policy), Some(&table)).unwrap();
        assert!(r.failures.is_empty(), "{policy}: {:?}", r.failures);
        assert_eq!(r.outcomes.len(), 2);
        for o in &r.outcomes {
            assert_eq!(o.class, CLASS);
            assert_eq!(o.doses_mg.len(), MAX_CYCLES);
            assert_eq!(o.grades.len(), MAX_CYCLES);
            assert!(o.grades.iter().all(|&g: &Grade| g <= 4));
            let (_, hi) = grid.bounds_mg(o.covariates.bsa);
            assert!(o.doses_mg.iter().all(|&d| d > 0.0 && d <= hi + 1e-9), "{policy}: {:?}", o.doses_mg);
        }
        let occ: f64 = (0..5).map(|g| r.metrics.occurrence(0, g)).sum();
        assert!((occ - 1.0).abs() < 1e-12);
    }
}

#[test]
fn table_policies_need_a_table() {
    let model = PopulationModel::default();
    for policy in [PolicyKind::Rl, PolicyKind::DaRl] {
        assert!(run_trial(&model, &config(policy), None).is_err());
    }
}

#[test]
fn table_survives_a_file_round_trip() {
    let table = small_table();
    let path = std::env::temp_dir().join(format!("mipd-table-{}.bin", std::process::id()));
    table.save(&path).unwrap();
    let back = QTable::load(&path).unwrap();
    std::fs::remove_file(&path).unwrap();
    assert_eq!(back, table);
}

#[test]
fn export_writes_metrics_and_csvs() {
    let model = PopulationModel::default();
    let r = run_trial(&model, &config(PolicyKind::Standard), None).unwrap();
    let dir = std::env::temp_dir().join(format!("mipd-export-{}", std::process::id()));
    write_all(&r, &dir).unwrap();
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["policy"], "standard");
    let patients = std::fs::read_to_string(dir.join("patients.csv")).unwrap();
    assert_eq!(patients.lines().count(), 1 + 2 * MAX_CYCLES);
    for f in ["bands.csv", "grades.csv"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    std::fs::remove_dir_all(&dir).unwrap();
}
