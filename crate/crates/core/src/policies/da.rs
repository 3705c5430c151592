//! Risk-minimizing dose over the posterior ensemble.
//!
//! Each member's nadir decreases with dose, so every member is summarized by
//! two threshold doses: the largest dose that still leaves it at grade 0 and
//! the largest dose that avoids grade 4. The weighted risk is then piecewise
//! constant in dose and its exact minimizer over an interval is found by
//! scanning the thresholds.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::GradeScale;
use crate::error::{Error, Result};
use crate::inference::patient::PredictiveMember;
use crate::optimize::brent_root;
use crate::pkpd::model::PopulationModel;
use crate::pkpd::simulate::Simulator;
use crate::policies::reward::RewardSpec;

/// Dose thresholds of one member, mg. Grade 0 iff `dose ≤ grade0_max`;
/// grade 4 iff `dose > grade4_min`. Infinite values mean "never" or
/// "always" inside the searched interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemberThresholds {
    pub weight: f64,
    pub grade0_max: f64,
    pub grade4_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub dose_mg: f64,
    pub p_grade0: f64,
    pub p_grade4: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfile {
    pub members: Vec<MemberThresholds>,
    pub lo: f64,
    pub hi: f64,
    pub lambda0: f64,
    pub lambda4: f64,
}

/// Dose in `[lo, hi]` where `ln nadir` crosses `ln level`, or ±∞ when the
/// crossing lies outside. Returns the largest dose with nadir ≥ level.
#[allow(clippy::too_many_arguments)]
fn crossing(
    nadir: &mut impl FnMut(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    n_lo: f64,
    n_hi: f64,
    level: f64,
    xtol: f64,
) -> Result<f64> {
    if n_lo < level {
        return Ok(f64::NEG_INFINITY);
    }
    if n_hi >= level {
        return Ok(f64::INFINITY);
    }
    let mut failure = None;
    let g = |d: f64| match nadir(d) {
        Ok(n) => n.max(1e-300).ln() - level.ln(),
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    };
    let root = brent_root(g, lo, hi, n_lo.max(1e-300).ln() - level.ln(), n_hi.max(1e-300).ln() - level.ln(), xtol, 100)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(root)
}

impl MemberThresholds {
    pub fn compute(
        member: &PredictiveMember,
        sim: &Simulator<f64>,
        model: &PopulationModel,
        scale: &GradeScale,
        lo: f64,
        hi: f64,
        xtol: f64,
    ) -> Result<Self> {
        let mut nadir = |d: f64| member.nadir(sim, model, d);
        let n_lo = nadir(lo)?;
        let n_hi = nadir(hi)?;
        let g0 = scale.thresholds[0];
        let g4 = scale.thresholds[3];
        Ok(Self {
            weight: member.weight,
            grade0_max: crossing(&mut nadir, lo, hi, n_lo, n_hi, g0, xtol)?,
            grade4_min: crossing(&mut nadir, lo, hi, n_lo, n_hi, g4, xtol)?,
        })
    }
}

impl RiskProfile {
    /// Thresholds for every member, computed in parallel.
    pub fn build(
        members: &[PredictiveMember],
        sim: &Simulator<f64>,
        model: &PopulationModel,
        scale: &GradeScale,
        spec: &RewardSpec,
        bounds_mg: (f64, f64),
        xtol: f64,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::InvalidInput("empty ensemble".into()));
        }
        let (lo, hi) = bounds_mg;
        let mut thresholds = members
            .par_iter()
            .map(|m| MemberThresholds::compute(m, sim, model, scale, lo, hi, xtol))
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = thresholds.iter().map(|t| t.weight).sum();
        if !(total > 0.0) {
            return Err(Error::InvalidInput("ensemble weights sum to zero".into()));
        }
        for t in &mut thresholds {
            t.weight /= total;
        }
        Ok(Self {
            members: thresholds,
            lo,
            hi,
            lambda0: spec.lambda0,
            lambda4: spec.lambda4,
        })
    }

    pub fn at(&self, dose_mg: f64) -> RiskPoint {
        let mut p0 = 0.0;
        let mut p4 = 0.0;
        for m in &self.members {
            if dose_mg <= m.grade0_max {
                p0 += m.weight;
            }
            if dose_mg > m.grade4_min {
                p4 += m.weight;
            }
        }
        RiskPoint {
            dose_mg,
            p_grade0: p0,
            p_grade4: p4,
            risk: self.lambda0 * p0 + self.lambda4 * p4,
        }
    }

    pub fn curve(&self, doses_mg: &[f64]) -> Vec<RiskPoint> {
        doses_mg.iter().map(|&d| self.at(d)).collect()
    }

    /// Exact minimizer of the weighted risk on `[lo, hi]`; the lowest
    /// minimizing dose is returned. Doses just past a grade-0 threshold are
    /// offset by `offset` so they land strictly beyond it.
    pub fn minimize(&self, offset: f64) -> RiskPoint {
        let mut candidates = vec![self.lo];
        for m in &self.members {
            let t = m.grade0_max;
            if t.is_finite() && t >= self.lo && t < self.hi {
                candidates.push((t + offset).min(self.hi));
            }
        }
        candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut best = self.at(candidates[0]);
        for &d in &candidates[1..] {
            let p = self.at(d);
            if p.risk < best.risk - 1e-12 {
                best = p;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaDose {
    pub dose_mg: f64,
    pub risk: RiskPoint,
    pub profile: RiskProfile,
}

/// Default root tolerance on the dose, mg.
pub const THRESHOLD_XTOL: f64 = 0.02;

pub fn da_guided_dose(
    members: &[PredictiveMember],
    sim: &Simulator<f64>,
    model: &PopulationModel,
    scale: &GradeScale,
    spec: &RewardSpec,
    bounds_mg: (f64, f64),
) -> Result<DaDose> {
    let ess = {
        let total: f64 = members.iter().map(|m| m.weight).sum();
        1.0 / members.iter().map(|m| (m.weight / total).powi(2)).sum::<f64>()
    };
    if ess < 1.0 + 1e-9 {
        warn!("ensemble has collapsed to one member; risk reduces to a point prediction");
    }
    let profile = RiskProfile::build(members, sim, model, scale, spec, bounds_mg, THRESHOLD_XTOL)?;
    let risk = profile.minimize(2.0 * THRESHOLD_XTOL);
    Ok(DaDose {
        dose_mg: risk.dose_mg,
        risk,
        profile,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::filter::FilterConfig;
    use crate::inference::patient::PatientEnsemble;
    use crate::ode::SolverOptions;
    use crate::pkpd::model::PatientCovariates;
    use crate::policies::grid::DoseGrid;
    use crate::rng::substream;

    fn members(n: usize, seed: u64) -> (PopulationModel, Vec<PredictiveMember>) {
        let m = PopulationModel::default();
        let mut rng = substream(seed, &[]);
        let e = PatientEnsemble::from_prior(
            &m,
            PatientCovariates::reference(),
            FilterConfig { members: n, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        let p = e.predictive(&mut rng).unwrap();
        (m, p)
    }

    fn profile(points: &[(f64, f64, f64)]) -> RiskProfile {
        RiskProfile {
            members: points
                .iter()
                .map(|&(weight, grade0_max, grade4_min)| MemberThresholds { weight, grade0_max, grade4_min })
                .collect(),
            lo: 100.0,
            hi: 400.0,
            lambda0: 1.0 / 3.0,
            lambda4: 2.0 / 3.0,
        }
    }

    #[test]
    fn weighted_risk_arithmetic() {
        let p = profile(&[(0.2, 250.0, f64::INFINITY), (0.1, 120.0, 200.0), (0.7, 150.0, 390.0)]);
        let r = p.at(220.0);
        assert!((r.p_grade0 - 0.2).abs() < 1e-15);
        assert!((r.p_grade4 - 0.1).abs() < 1e-15);
        assert!((r.risk - (0.2 / 3.0 + 0.2 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn insensitive_members_give_lowest_dose() {
        let p = profile(&[(0.5, f64::NEG_INFINITY, f64::INFINITY), (0.5, f64::NEG_INFINITY, f64::INFINITY)]);
        assert_eq!(p.minimize(0.04).dose_mg, 100.0);
    }

    #[test]
    fn minimizer_is_exact_on_thresholds() {
        let p = profile(&[(0.5, 180.0, 300.0), (0.5, 220.0, 260.0)]);
        let best = p.minimize(0.04);
        assert!((best.dose_mg - 220.04).abs() < 1e-12);
        assert_eq!(best.risk, 0.0);
        for d in (100..=400).map(|d| d as f64) {
            assert!(p.at(d).risk >= best.risk);
        }
    }

    #[test]
    fn dose_beats_every_grid_dose_by_direct_simulation() {
        let (m, pm) = members(40, 21);
        let sim = Simulator::<f64>::new(SolverOptions::planning());
        let scale = GradeScale::default();
        let spec = RewardSpec::default();
        let bsa = PatientCovariates::reference().bsa;
        let grid = DoseGrid::default();
        let r = da_guided_dose(&pm, &sim, &m, &scale, &spec, grid.bounds_mg(bsa)).unwrap();
        let direct = |d: f64| {
            let mut p0 = 0.0;
            let mut p4 = 0.0;
            let total: f64 = pm.iter().map(|x| x.weight).sum();
            for x in &pm {
                let g = scale.grade_unchecked(x.nadir(&sim, &m, d).unwrap());
                if g == 0 {
                    p0 += x.weight / total;
                }
                if g == 4 {
                    p4 += x.weight / total;
                }
            }
            spec.risk(p0, p4)
        };
        let at_choice = direct(r.dose_mg);
        assert!((at_choice - r.risk.risk).abs() < 1e-9);
        for d in grid.levels_mg(bsa) {
            assert!(at_choice <= direct(d) + 1e-9, "grid dose {d}");
            assert!((r.profile.at(d).risk - direct(d)).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_scaling_leaves_dose_unchanged() {
        let (m, mut pm) = members(12, 22);
        for (i, x) in pm.iter_mut().enumerate() {
            x.weight = 1.0 + i as f64;
        }
        let sim = Simulator::<f64>::new(SolverOptions::planning());
        let bounds = DoseGrid::default().bounds_mg(1.8);
        let a = da_guided_dose(&pm, &sim, &m, &GradeScale::default(), &RewardSpec::default(), bounds).unwrap();
        for x in pm.iter_mut() {
            x.weight *= 7.5;
        }
        let b = da_guided_dose(&pm, &sim, &m, &GradeScale::default(), &RewardSpec::default(), bounds).unwrap();
        assert_eq!(a.dose_mg, b.dose_mg);
    }
}
