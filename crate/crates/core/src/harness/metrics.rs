//! Per-patient outcomes and their aggregates.

use serde::{Deserialize, Serialize};

use crate::cohort::{Grade, N_GRADES};
use crate::pkpd::model::PatientCovariates;
use crate::pkpd::observe::Observation;
use crate::planner::mcts::discounted_return;
use crate::policies::reward::RewardSpec;

/// Everything recorded about one simulated patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientOutcome {
    pub index: usize,
    pub class: usize,
    pub covariates: PatientCovariates,
    pub doses_mg: Vec<f64>,
    /// True model nadirs, 10⁹ cells/L.
    pub nadirs: Vec<f64>,
    /// Grades of the true nadirs.
    pub grades: Vec<Grade>,
    /// Grades the policy was told (observation or model nadir, per config).
    pub policy_grades: Vec<Grade>,
    /// Posterior grade estimates (expected nadir, most probable grade) when
    /// an ensemble was tracked.
    pub estimated_grades: Vec<[Grade; 2]>,
    /// Grades of single observations at the configured probe days, per cycle.
    pub probe_grades: Vec<Vec<Grade>>,
    /// True ANC at each whole day since the first dose.
    pub daily_anc: Vec<f64>,
    pub observations: Vec<Observation>,
}

/// The four evaluation functions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Mean utility of all nadirs (higher is better).
    pub mean_utility: f64,
    /// Mean squared deviation of nadirs from the target (lower is better).
    pub mean_target_deviation: f64,
    /// λ-weighted frequency of grades 0 and 4 (lower is better).
    pub weighted_grade_risk: f64,
    /// Mean discounted total reward per patient (higher is better).
    pub mean_total_reward: f64,
}

pub fn evaluate_all(outcomes: &[PatientOutcome], spec: &RewardSpec, gamma: f64) -> Aggregates {
    let nadirs: Vec<f64> = outcomes.iter().flat_map(|o| o.nadirs.iter().copied()).collect();
    let grades: Vec<Grade> = outcomes.iter().flat_map(|o| o.grades.iter().copied()).collect();
    let n = nadirs.len().max(1) as f64;
    let freq = |g: Grade| grades.iter().filter(|&&x| x == g).count() as f64 / grades.len().max(1) as f64;
    let rewards: Vec<f64> = outcomes
        .iter()
        .map(|o| {
            let r: Vec<f64> = o.grades.iter().map(|&g| spec.reward(g)).collect();
            discounted_return(&r, gamma)
        })
        .collect();
    Aggregates {
        mean_utility: nadirs.iter().map(|&x| spec.utility(x)).sum::<f64>() / n,
        mean_target_deviation: nadirs.iter().map(|&x| spec.target_loss(x)).sum::<f64>() / n,
        weighted_grade_risk: spec.risk(freq(0), freq(4)),
        mean_total_reward: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
    }
}

/// Linear-interpolation quantile of unsorted data; NaN when empty.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (i, f) = (h.floor() as usize, h.fract());
    if i + 1 < v.len() {
        v[i] + f * (v[i + 1] - v[i])
    } else {
        v[i]
    }
}

/// Smallest value whose cumulative normalized weight reaches `p`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], p: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    if idx.is_empty() || !(total > 0.0) {
        return f64::NAN;
    }
    let target = p.clamp(0.0, 1.0) * total;
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i];
        if acc >= target - 1e-12 * total {
            return values[i];
        }
    }
    values[idx[idx.len() - 1]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub p05: f64,
    pub p50: f64,
    pub p95: f64,
}

impl Band {
    pub fn weighted(values: &[f64], weights: &[f64]) -> Self {
        Self {
            p05: weighted_quantile(values, weights, 0.05),
            p50: weighted_quantile(values, weights, 0.5),
            p95: weighted_quantile(values, weights, 0.95),
        }
    }

    pub fn of(values: &[f64]) -> Self {
        Self {
            p05: quantile(values, 0.05),
            p50: quantile(values, 0.5),
            p95: quantile(values, 0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeBand {
    /// Days since the first dose.
    pub day: f64,
    pub n: usize,
    pub band: Band,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub patients: usize,
    pub failed: usize,
    /// Fraction of patients per grade, per cycle.
    pub grade_occurrence: Vec<[f64; N_GRADES]>,
    pub nadir_bands: Vec<Band>,
    /// Percentiles of the true ANC per day.
    pub true_bands: Vec<TimeBand>,
    /// Percentiles of the observed ANC per observation time.
    pub observed_bands: Vec<TimeBand>,
    pub aggregates: Aggregates,
}

impl TrialMetrics {
    pub fn compute(outcomes: &[PatientOutcome], failed: usize, cycles: usize, spec: &RewardSpec, gamma: f64) -> Self {
        let grade_occurrence = (0..cycles)
            .map(|c| {
                let mut row = [0.0; N_GRADES];
                for o in outcomes {
                    row[o.grades[c] as usize] += 1.0;
                }
                row.map(|x| x / outcomes.len().max(1) as f64)
            })
            .collect();
        let nadir_bands = (0..cycles)
            .map(|c| Band::of(&outcomes.iter().map(|o| o.nadirs[c]).collect::<Vec<_>>()))
            .collect();
        let days = outcomes.iter().map(|o| o.daily_anc.len()).min().unwrap_or(0);
        let true_bands = (0..days)
            .map(|d| {
                let v: Vec<f64> = outcomes.iter().map(|o| o.daily_anc[d]).collect();
                TimeBand {
                    day: d as f64,
                    n: v.len(),
                    band: Band::of(&v),
                }
            })
            .collect();
        let mut by_time: std::collections::BTreeMap<u64, Vec<f64>> = Default::default();
        for o in outcomes {
            for obs in o.observations.iter().filter(|x| x.kind == crate::pkpd::simulate::Observable::Neutrophils) {
                by_time.entry(obs.time.to_bits()).or_default().push(obs.value);
            }
        }
        let mut observed_bands: Vec<TimeBand> = by_time
            .into_iter()
            .map(|(t, v)| TimeBand {
                day: f64::from_bits(t) / 24.0,
                n: v.len(),
                band: Band::of(&v),
            })
            .collect();
        observed_bands.sort_by(|a, b| a.day.total_cmp(&b.day));
        Self {
            patients: outcomes.len(),
            failed,
            grade_occurrence,
            nadir_bands,
            true_bands,
            observed_bands,
            aggregates: evaluate_all(outcomes, spec, gamma),
        }
    }

    /// Occurrence of grade `g` in cycle `c` (0-based).
    pub fn occurrence(&self, c: usize, g: Grade) -> f64 {
        self.grade_occurrence[c][g as usize]
    }
}

/// Root mean squared difference between estimated and true grades.
pub fn grade_rmse(pairs: impl Iterator<Item = (Grade, Grade)>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (a, b) in pairs {
        s += (a as f64 - b as f64).powi(2);
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        (s / n as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::GradeScale;

    fn outcome(nadirs: Vec<f64>) -> PatientOutcome {
        let s = GradeScale::default();
        PatientOutcome {
            index: 0,
            class: 0,
            covariates: PatientCovariates::reference(),
            doses_mg: vec![0.0; nadirs.len()],
            grades: nadirs.iter().map(|&x| s.grade_unchecked(x)).collect(),
            policy_grades: Vec::new(),
            estimated_grades: Vec::new(),
            probe_grades: Vec::new(),
            daily_anc: Vec::new(),
            observations: Vec::new(),
            nadirs,
        }
    }

    #[test]
    fn aggregate_examples() {
        let spec = RewardSpec::default();
        let a = evaluate_all(&[outcome(vec![1.0; 6])], &spec, 0.5);
        assert_eq!(a.mean_target_deviation, 0.0);
        let a = evaluate_all(&[outcome(vec![1.2, 0.7, 1.7, 1.0, 0.9, 1.6])], &spec, 0.5);
        assert_eq!(a.weighted_grade_risk, 0.0);
        assert!((a.mean_total_reward - 1.96875).abs() < 1e-15);
        let a = evaluate_all(&[outcome(vec![0.3; 6])], &spec, 0.5);
        assert!((a.mean_total_reward + 3.9375).abs() < 1e-15);
        assert!((a.weighted_grade_risk - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn occurrences_partition() {
        let o = vec![outcome(vec![0.3, 2.5]), outcome(vec![1.2, 2.5]), outcome(vec![0.8, 0.1])];
        let m = TrialMetrics::compute(&o, 0, 2, &RewardSpec::default(), 0.5);
        for row in &m.grade_occurrence {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((m.occurrence(0, 4) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn quantiles() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.25), 1.25);
        assert_eq!(quantile(&[4.0], 0.95), 4.0);
        assert!(quantile(&[], 0.5).is_nan());
        assert_eq!(weighted_quantile(&[3.0, 1.0, 2.0], &[0.2, 0.5, 0.3], 0.5), 1.0);
        assert_eq!(weighted_quantile(&[3.0, 1.0, 2.0], &[0.2, 0.5, 0.3], 0.6), 2.0);
        assert_eq!(weighted_quantile(&[3.0, 1.0, 2.0], &[1.0, 1.0, 1.0], 1.0), 3.0);
        assert_eq!(grade_rmse([(1, 1), (2, 0)].into_iter()), 2f64.sqrt());
    }
}
