use proptest::prelude::*;

use mipd_core::cohort::{
    decode_history, encode_history, CohortConfig, CovariateClass, Encoded, Grade, GradeScale, PatientState, MAX_CYCLES,
    N_CLASSES,
};
use mipd_core::darl::boltzmann_priors;
use mipd_core::harness::{weighted_quantile, Band};
use mipd_core::inference::filter::systematic_indices;
use mipd_core::pkpd::model::PopulationModel;
use mipd_core::pkpd::simulate::CycleSpec;
use mipd_core::pkpd::system::baseline_state;
use mipd_core::planner::Slab;
use mipd_core::policies::DoseGrid;
use mipd_core::rng::substream;
use mipd_core::Simulator;

fn history(max_len: usize) -> impl Strategy<Value = Vec<Grade>> {
    prop::collection::vec(0u8..5, 0..=max_len)
}

proptest! {
    #[test]
    fn history_encoding_round_trips(h in history(MAX_CYCLES - 1)) {
        match encode_history(&h).unwrap() {
            Encoded::Decision(row) => prop_assert_eq!(decode_history(row).unwrap(), h),
            Encoded::Leaf => prop_assert!(false, "decision history encoded as leaf"),
        }
    }

    #[test]
    fn global_state_index_round_trips(l in 0..N_CLASSES, h in history(MAX_CYCLES)) {
        let s = PatientState { class: CovariateClass::from_index(l).unwrap(), grades: h };
        let g = match s.encode().unwrap() {
            Encoded::Decision(g) => g,
            Encoded::Leaf => return Ok(()),
        };
        prop_assert_eq!(PatientState::decode(g).unwrap(), s);
    }

    #[test]
    fn grades_fall_as_counts_rise(a in 0.0f64..30.0, b in 0.0f64..30.0) {
        let s = GradeScale::default();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(s.grade_unchecked(lo) >= s.grade_unchecked(hi));
    }

    #[test]
    fn boltzmann_rows_are_distributions(
        q in prop::collection::vec(-3.0f64..1.0, 39),
        n in prop::collection::vec(0u32..5, 39),
        bw in 0.5f64..4.0,
    ) {
        let p = boltzmann_priors(&q, Some(&n), bw);
        prop_assert_eq!(p.len(), 39);
        prop_assert!(p.iter().all(|x| x.is_finite() && *x > 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_values_give_uniform_priors(v in -2.0f64..1.0, bw in 0.5f64..4.0) {
        let p = boltzmann_priors(&[v; 39], None, bw);
        for x in p {
            prop_assert!((x - 1.0 / 39.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backups_equal_batch_means(g in prop::collection::vec(-2.0f64..1.0, 1..60)) {
        let mut slab = Slab::new(1, 1);
        for &x in &g {
            slab.backup(0, 0, x);
        }
        let mean = g.iter().sum::<f64>() / g.len() as f64;
        prop_assert!((slab.q_row(0)[0] - mean).abs() < 1e-12);
        prop_assert_eq!(slab.n_row(0)[0] as usize, g.len());
    }

    #[test]
    fn systematic_counts_within_one_of_expectation(
        raw in prop::collection::vec(0.0f64..1.0, 1..20),
        n in 1usize..200,
        u in 0.0f64..1.0,
    ) {
        let total: f64 = raw.iter().sum();
        prop_assume!(total > 1e-6);
        let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let idx = systematic_indices(&w, n, u);
        prop_assert_eq!(idx.len(), n);
        prop_assert!(idx.windows(2).all(|p| p[0] <= p[1]));
        for (i, wi) in w.iter().enumerate() {
            let count = idx.iter().filter(|&&k| k == i).count() as f64;
            prop_assert!((count - n as f64 * wi).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn weighted_bands_are_ordered(
        pairs in prop::collection::vec((0.0f64..10.0, 0.01f64..1.0), 1..50),
    ) {
        let (v, w): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let b = Band::weighted(&v, &w);
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(lo <= b.p05 && b.p05 <= b.p50 && b.p50 <= b.p95 && b.p95 <= hi);
        prop_assert_eq!(weighted_quantile(&v, &w, 1.0), hi);
    }

    #[test]
    fn nearest_grid_level_is_within_half_a_step(x in 60.0f64..250.0) {
        let g = DoseGrid::default();
        prop_assert!((g.level(g.nearest_index(x)) - x).abs() <= g.step / 2.0 + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// A larger dose never raises a patient's nadir.
    #[test]
    fn nadir_is_monotone_in_dose(seed in any::<u64>(), l in 0..N_CLASSES, d1 in 0.0f64..500.0, d2 in 0.0f64..500.0) {
        let model = PopulationModel::default();
        let class = CovariateClass::from_index(l).unwrap();
        let p = CohortConfig::default().sample_patient(&model, &class, &mut substream(seed, &[]));
        let params = p.parameters(&model).unwrap();
        let sim = Simulator::new(mipd_core::ode::SolverOptions::default());
        let y0 = baseline_state(params.circ0);
        let occ = params.occasion(0);
        let nadir = |d: f64| sim.run_cycle(&model, &occ, y0, &CycleSpec::new(0.0, d), &[], false).unwrap().nadir;
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(nadir(hi) <= nadir(lo) * (1.0 + 1e-6));
    }
}
