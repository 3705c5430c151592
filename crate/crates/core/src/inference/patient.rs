//! Particle ensemble over the PK/PD state and random effects of one patient.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{sample_effects, Grade, GradeScale, N_GRADES};
use crate::error::{Error, Result};
use crate::inference::filter::{self, Ensemble, FilterConfig, StateSpaceModel, UpdateSummary};
use crate::ode::SolverOptions;
use crate::pkpd::model::{IndividualParameters, OccasionParams, PatientCovariates, PopulationModel, IIV_DIM, IOV_DIM};
use crate::pkpd::observe::{neg_log_lik, Observation};
use crate::pkpd::simulate::{
    CycleSpec, Dose, Infusion, Observable, RunningNadir, Simulator, DEFAULT_CYCLE_LENGTH,
    DEFAULT_GRID_STEP,
};
use crate::pkpd::system::{baseline_state, idx, N_STATES};
use crate::rng::{substream, SimRng};

const TIME_EPS: f64 = 1e-9;

/// One particle: random effects plus the simulated state reached so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkPdMember {
    pub params: IndividualParameters,
    pub time: f64,
    pub state: [f64; N_STATES],
    /// Cycle the nadir tracker refers to.
    pub cycle: usize,
    /// Nadirs of the cycles before `cycle`.
    pub nadirs: Vec<f64>,
    pub tracker: RunningNadir,
}

impl PkPdMember {
    pub fn new(params: IndividualParameters) -> Self {
        let state = baseline_state(params.circ0);
        let mut tracker = RunningNadir::default();
        tracker.push(0.0, params.circ0);
        Self {
            params,
            time: 0.0,
            state,
            cycle: 0,
            nadirs: Vec::new(),
            tracker,
        }
    }

    /// Nadir of cycle `c`; partial if the cycle is still running.
    pub fn nadir(&self, c: usize) -> Result<f64> {
        if let Some(&n) = self.nadirs.get(c) {
            return Ok(n);
        }
        if c == self.cycle {
            if let Some(v) = self.tracker.value() {
                return Ok(v);
            }
        }
        Err(Error::MissingPrerequisite(format!(
            "member history does not cover cycle {}",
            c + 1
        )))
    }
}

/// Everything a member needs to be propagated: the patient's covariates and
/// the doses given so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientModel {
    pub model: PopulationModel,
    pub covariates: PatientCovariates,
    pub doses: Vec<Dose>,
    pub cycle_length: f64,
    /// Spacing of the samples feeding the nadir trackers, h.
    pub grid_step: f64,
    pub jitter: f64,
    pub solver: SolverOptions,
}

impl PatientModel {
    pub fn new(model: PopulationModel, covariates: PatientCovariates) -> Self {
        Self {
            model,
            covariates,
            doses: Vec::new(),
            cycle_length: DEFAULT_CYCLE_LENGTH,
            grid_step: DEFAULT_GRID_STEP,
            jitter: FilterConfig::default().jitter,
            solver: SolverOptions::planning(),
        }
    }

    pub fn occasion_of(&self, t: f64) -> usize {
        ((t + TIME_EPS) / self.cycle_length).floor().max(0.0) as usize
    }

    /// Integrates a member forward to `t1`, drawing IOV for newly entered
    /// occasions from `rng`.
    pub fn advance<R: Rng + ?Sized>(&self, member: &mut PkPdMember, t1: f64, rng: &mut R) -> Result<()> {
        if t1 < member.time - TIME_EPS {
            return Err(Error::InvalidInput(format!(
                "cannot propagate backwards from {} to {t1}",
                member.time
            )));
        }
        let sim = Simulator::<f64>::new(self.solver);
        let len = self.cycle_length;
        while member.time < t1 - TIME_EPS {
            let c = self.occasion_of(member.time);
            let start = c as f64 * len;
            let b = t1.min(start + len);
            while member.cycle < c {
                let n = member.tracker.value().unwrap_or(member.state[idx::CIRC]);
                member.nadirs.push(n);
                member.tracker = RunningNadir::default();
                member.cycle += 1;
                if member.cycle == c {
                    member.tracker.push(member.time, member.state[idx::CIRC]);
                }
            }
            while member.params.kappa.len() <= c {
                member.params.kappa.push(sample_effects(&self.model.iov_variances(), rng));
            }
            let occ = member.params.occasion(c);
            let a = member.time;
            let first = ((a - start) / self.grid_step).floor() as usize + 1;
            let mut samples: Vec<f64> = (first..)
                .map(|k| start + k as f64 * self.grid_step)
                .take_while(|&t| t < b - TIME_EPS)
                .collect();
            samples.push(b);
            let infusions: Vec<Infusion> = self
                .doses
                .iter()
                .map(|d| Infusion::from_dose(&self.model, d))
                .filter(|inf| inf.stop > a && inf.start < b)
                .collect();
            let run = sim.run_window(&occ, member.state, a, b, &infusions, &[], &samples)?;
            for (t, s) in samples.iter().zip(&run.samples) {
                member.tracker.push(*t, s[idx::CIRC]);
            }
            member.state = run.end;
            member.time = b;
        }
        Ok(())
    }

    fn observable(&self, member: &PkPdMember, kind: Observable) -> f64 {
        match kind {
            Observable::Neutrophils => member.state[idx::CIRC],
            Observable::Drug => member.state[idx::CENT] / member.params.occasion(member.cycle).v1,
        }
    }
}

impl StateSpaceModel for PatientModel {
    type Member = PkPdMember;
    type Observation = Observation;

    fn propagate(&self, member: &mut PkPdMember, obs: &Observation, rng: &mut SimRng) -> Result<()> {
        self.advance(member, obs.time, rng)
    }

    fn log_likelihood(&self, member: &PkPdMember, obs: &Observation) -> f64 {
        let h = self.observable(member, obs.kind);
        match neg_log_lik(obs.value, h, self.model.residual_sd(obs.kind)) {
            Ok(nll) => -nll,
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn rejuvenate<R: Rng + ?Sized>(
        &self,
        members: &mut [PkPdMember],
        previous: &[PkPdMember],
        previous_weights: &[f64],
        rng: &mut R,
    ) {
        if self.jitter <= 0.0 {
            return;
        }
        let vectors: Vec<Vec<f64>> = previous.iter().map(jitter_coordinates).collect();
        let dim = vectors[0].len();
        let Some(factor) = covariance_factor(&vectors, previous_weights, dim) else {
            return;
        };
        let h = self.jitter;
        for m in members.iter_mut() {
            let z = DVector::from_iterator(dim, (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let dz = &factor * z * h;
            for k in 0..IIV_DIM {
                m.params.eta[k] += dz[k];
            }
            let eta_c0 = m.params.eta_circ0 + dz[IIV_DIM];
            m.params = m.params.with_eta_circ0(&self.model, self.covariates.anc0, eta_c0);
            if let Some(last) = m.params.kappa.last_mut() {
                for k in 0..IOV_DIM {
                    last[k] += dz[IIV_DIM + 1 + k];
                }
            }
        }
    }
}

/// Log-scale coordinates that rejuvenation perturbs: η, η_Circ0 and the IOV
/// of the most recent occasion.
fn jitter_coordinates(m: &PkPdMember) -> Vec<f64> {
    let mut v: Vec<f64> = m.params.eta.to_vec();
    v.push(m.params.eta_circ0);
    if let Some(k) = m.params.kappa.last() {
        v.extend_from_slice(k);
    }
    v
}

/// Matrix `L` with `L·Lᵀ` equal to the weighted covariance. Eigenvalues are
/// clipped at zero so singular directions get no jitter.
fn covariance_factor(vectors: &[Vec<f64>], weights: &[f64], dim: usize) -> Option<DMatrix<f64>> {
    let mut mean = DVector::zeros(dim);
    for (v, &w) in vectors.iter().zip(weights) {
        mean += DVector::from_column_slice(v) * w;
    }
    let mut cov = DMatrix::zeros(dim, dim);
    for (v, &w) in vectors.iter().zip(weights) {
        let d = DVector::from_column_slice(v) - &mean;
        cov += &d * d.transpose() * w;
    }
    if !cov.iter().all(|x| x.is_finite()) {
        return None;
    }
    let eig = SymmetricEigen::new(cov);
    let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}

/// Weighted mean of member nadirs.
pub fn posterior_expected_nadir(weights: &[f64], nadirs: &[f64]) -> f64 {
    weights.iter().zip(nadirs).map(|(w, n)| w * n).sum()
}

/// Total weight per grade.
pub fn grade_probabilities(weights: &[f64], grades: &[Grade]) -> [f64; N_GRADES] {
    let mut p = [0.0; N_GRADES];
    for (w, &g) in weights.iter().zip(grades) {
        p[g as usize] += w;
    }
    p
}

/// Most probable grade; ties go to the lower grade.
pub fn map_grade(probabilities: &[f64; N_GRADES]) -> Grade {
    let mut best = 0;
    for g in 1..N_GRADES {
        if probabilities[g] > probabilities[best] {
            best = g;
        }
    }
    best as Grade
}

/// A member frozen at a cycle start, ready to be simulated under candidate doses.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMember {
    pub weight: f64,
    pub occasion: OccasionParams,
    pub state: [f64; N_STATES],
    pub start: f64,
}

impl PredictiveMember {
    pub fn simulate(
        &self,
        sim: &Simulator<f64>,
        model: &PopulationModel,
        dose_mg: f64,
        keep_circ: bool,
    ) -> Result<crate::pkpd::simulate::CycleRun<f64>> {
        sim.run_cycle(model, &self.occasion, self.state, &CycleSpec::new(self.start, dose_mg), &[], keep_circ)
    }

    pub fn nadir(&self, sim: &Simulator<f64>, model: &PopulationModel, dose_mg: f64) -> Result<f64> {
        Ok(self.simulate(sim, model, dose_mg, false)?.nadir)
    }
}

/// Posterior ensemble of one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEnsemble {
    pub context: PatientModel,
    pub ensemble: Ensemble<PkPdMember>,
    pub config: FilterConfig,
}

impl PatientEnsemble {
    /// Draws `config.members` members from the prior given the covariates.
    pub fn from_prior<R: Rng + ?Sized>(
        model: &PopulationModel,
        covariates: PatientCovariates,
        config: FilterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        covariates.validate()?;
        if config.members == 0 {
            return Err(Error::InvalidInput("ensemble needs at least one member".into()));
        }
        let mut members = Vec::with_capacity(config.members);
        for _ in 0..config.members {
            let eta = sample_effects(&model.iiv_variances(), rng);
            let eta_circ0: f64 = rng.sample(StandardNormal);
            let params = IndividualParameters::new(model, &covariates, eta, Vec::new(), eta_circ0)?;
            members.push(PkPdMember::new(params));
        }
        let mut context = PatientModel::new(model.clone(), covariates);
        context.jitter = config.jitter;
        Ok(Self {
            context,
            ensemble: Ensemble::uniform(members),
            config,
        })
    }

    pub fn time(&self) -> f64 {
        self.ensemble.members[0].time
    }

    pub fn len(&self) -> usize {
        self.ensemble.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ensemble.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.ensemble.weights
    }

    pub fn ess(&self) -> f64 {
        self.ensemble.ess()
    }

    /// Registers an administered dose. Doses must not start before the
    /// ensemble's current time or overlap earlier doses.
    pub fn add_dose(&mut self, dose: Dose) -> Result<()> {
        if dose.time < self.time() - TIME_EPS {
            return Err(Error::InvalidInput(format!(
                "dose at {} h precedes ensemble time {} h",
                dose.time,
                self.time()
            )));
        }
        if let Some(last) = self.context.doses.last() {
            if dose.time <= last.time {
                return Err(Error::InvalidInput("dose times must be strictly increasing".into()));
            }
        }
        if !(dose.amount_mg >= 0.0 && dose.duration > 0.0) {
            return Err(Error::InvalidInput("dose amount must be ≥ 0 and duration > 0".into()));
        }
        self.context.doses.push(dose);
        Ok(())
    }

    /// Propagates, reweights and, if needed, resamples. On a degenerate
    /// update the members have been propagated but the weights are unchanged.
    pub fn assimilate<R: Rng + ?Sized>(&mut self, obs: &Observation, rng: &mut R) -> Result<UpdateSummary> {
        if !(obs.value > 0.0) {
            return Err(Error::Domain(format!("observation {} must be positive", obs.value)));
        }
        let r = filter::assimilate(&self.context, &mut self.ensemble, obs, &self.config, rng);
        if let Err(Error::DegenerateUpdate) = &r {
            warn!("degenerate update at t = {} h; keeping prior weights", obs.time);
        }
        r
    }

    /// Propagates every member to `t` without an observation.
    pub fn advance_to<R: Rng + ?Sized>(&mut self, t: f64, rng: &mut R) -> Result<()> {
        let seed: u64 = rng.random();
        let ctx = &self.context;
        self.ensemble
            .members
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(m, member)| ctx.advance(member, t, &mut substream(seed, &[m as u64])))
    }

    pub fn member_nadirs(&self, cycle: usize) -> Result<Vec<f64>> {
        self.ensemble.members.iter().map(|m| m.nadir(cycle)).collect()
    }

    /// Σ w·nadir over members for cycle `cycle` (0-based).
    pub fn expected_nadir(&self, cycle: usize) -> Result<f64> {
        Ok(posterior_expected_nadir(self.weights(), &self.member_nadirs(cycle)?))
    }

    pub fn grade_probabilities(&self, cycle: usize, scale: &GradeScale) -> Result<[f64; N_GRADES]> {
        let grades: Vec<Grade> = self
            .member_nadirs(cycle)?
            .into_iter()
            .map(|n| scale.grade_unchecked(n))
            .collect();
        Ok(grade_probabilities(self.weights(), &grades))
    }

    pub fn map_grade(&self, cycle: usize, scale: &GradeScale) -> Result<Grade> {
        Ok(map_grade(&self.grade_probabilities(cycle, scale)?))
    }

    /// Freezes members at the current cycle start for dose prediction. The
    /// upcoming occasion's IOV is drawn fresh from the prior unless a member
    /// already carries it; the ensemble itself is left untouched.
    pub fn predictive<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<PredictiveMember>> {
        let t = self.time();
        let len = self.context.cycle_length;
        let c = (t / len).round();
        if (t - c * len).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("ensemble time {t} h is not at a cycle start")));
        }
        let c = c as usize;
        let seed: u64 = rng.random();
        let iov = self.context.model.iov_variances();
        Ok(self
            .ensemble
            .members
            .iter()
            .zip(&self.ensemble.weights)
            .enumerate()
            .map(|(m, (member, &weight))| {
                let mut params = member.params.clone();
                if params.kappa.len() <= c {
                    let mut r = substream(seed, &[m as u64]);
                    params.kappa.resize(c, [0.0; IOV_DIM]);
                    params.kappa.push(sample_effects(&iov, &mut r));
                }
                PredictiveMember {
                    weight,
                    occasion: params.occasion(c),
                    state: member.state,
                    start: t,
                }
            })
            .collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::GradeScale;

    fn cov() -> PatientCovariates {
        PatientCovariates::reference()
    }

    #[test]
    fn expected_nadir_and_grades_from_weights() {
        assert_eq!(posterior_expected_nadir(&[0.5, 0.5], &[1.0, 2.0]), 1.5);
        assert_eq!(posterior_expected_nadir(&[1.0, 0.0], &[0.7, 2.0]), 0.7);
        let third = 1.0 / 3.0;
        let p = grade_probabilities(&[third; 3], &[0, 4, 4]);
        assert!((p[4] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(map_grade(&p), 4);
        let p = grade_probabilities(&[0.25; 4], &[2; 4]);
        assert_eq!(p, [0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(map_grade(&p), 2);
        assert_eq!(map_grade(&[0.4, 0.0, 0.0, 0.0, 0.4]), 0);
    }

    #[test]
    fn expected_nadir_is_permutation_invariant() {
        let w = [0.1, 0.2, 0.3, 0.4];
        let n = [1.0, 0.3, 2.5, 0.9];
        let a = posterior_expected_nadir(&w, &n);
        let b = posterior_expected_nadir(&[0.4, 0.3, 0.1, 0.2], &[0.9, 2.5, 1.0, 0.3]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn member_nadirs_match_cycle_simulation() {
        let m = PopulationModel::default();
        let mut rng = substream(3, &[]);
        let mut e = PatientEnsemble::from_prior(&m, cov(), FilterConfig { members: 4, ..Default::default() }, &mut rng)
            .unwrap();
        e.add_dose(Dose { time: 0.0, amount_mg: 360.0, duration: 3.0 }).unwrap();
        e.advance_to(200.0, &mut rng).unwrap();
        e.advance_to(504.0, &mut rng).unwrap();
        e.advance_to(600.0, &mut rng).unwrap();
        let sim = Simulator::<f64>::new(e.context.solver);
        for member in &e.ensemble.members {
            assert_eq!(member.nadirs.len(), 1);
            let occ = member.params.occasion(0);
            let y0 = baseline_state(member.params.circ0);
            let run = sim.run_cycle(&m, &occ, y0, &CycleSpec::new(0.0, 360.0), &[200.0], false).unwrap();
            let rel = (run.nadir - member.nadirs[0]).abs() / run.nadir;
            assert!(rel < 1e-4, "{} vs {}", run.nadir, member.nadirs[0]);
            assert!(member.params.kappa.len() == 2);
        }
    }

    #[test]
    fn dose_only_leaves_weights_unchanged() {
        let m = PopulationModel::default();
        let mut rng = substream(4, &[]);
        let mut e = PatientEnsemble::from_prior(&m, cov(), FilterConfig { members: 8, ..Default::default() }, &mut rng)
            .unwrap();
        let w = e.weights().to_vec();
        e.add_dose(Dose { time: 0.0, amount_mg: 300.0, duration: 3.0 }).unwrap();
        assert_eq!(e.weights(), &w[..]);
        assert!(e.add_dose(Dose { time: 0.0, amount_mg: 300.0, duration: 3.0 }).is_err());
    }

    #[test]
    fn assimilation_keeps_weights_normalized_and_replays() {
        let m = PopulationModel::default();
        let run = |seed| {
            let mut rng = substream(seed, &[]);
            let mut e = PatientEnsemble::from_prior(&m, cov(), FilterConfig { members: 30, ..Default::default() }, &mut rng)
                .unwrap();
            e.add_dose(Dose { time: 0.0, amount_mg: 360.0, duration: 3.0 }).unwrap();
            for (t, y) in [(360.0, 1.2), (504.0, 3.9)] {
                let s = e
                    .assimilate(&Observation { time: t, value: y, kind: Observable::Neutrophils }, &mut rng)
                    .unwrap();
                assert!(s.ess >= 1.0 - 1e-9 && s.ess <= 30.0 + 1e-9);
                let sum: f64 = e.weights().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            e
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a, b);
        let json = a.to_json().unwrap();
        assert_eq!(PatientEnsemble::from_json(&json).unwrap(), a);
        let p = a.grade_probabilities(0, &GradeScale::default()).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predictive_does_not_mutate_ensemble() {
        let m = PopulationModel::default();
        let mut rng = substream(5, &[]);
        let e = PatientEnsemble::from_prior(&m, cov(), FilterConfig { members: 5, ..Default::default() }, &mut rng)
            .unwrap();
        let before = e.clone();
        let pm = e.predictive(&mut rng).unwrap();
        assert_eq!(pm.len(), 5);
        assert_eq!(e, before);
        let sim = Simulator::<f64>::new(SolverOptions::planning());
        let lo = pm[0].nadir(&sim, &m, 100.0).unwrap();
        let hi = pm[0].nadir(&sim, &m, 400.0).unwrap();
        assert!(hi < lo);
    }

    #[test]
    fn large_ensemble_agrees_with_small_within_monte_carlo_error() {
        let m = PopulationModel::default();
        let scale = |n: usize, seed: u64| {
            let mut rng = substream(seed, &[]);
            let mut e = PatientEnsemble::from_prior(&m, cov(), FilterConfig { members: n, ..Default::default() }, &mut rng)
                .unwrap();
            e.add_dose(Dose { time: 0.0, amount_mg: 360.0, duration: 3.0 }).unwrap();
            e.assimilate(&Observation { time: 360.0, value: 2.0, kind: Observable::Neutrophils }, &mut rng)
                .unwrap();
            e.advance_to(504.0, &mut rng).unwrap();
            let nadirs = e.member_nadirs(0).unwrap();
            let mean = e.expected_nadir(0).unwrap();
            let var: f64 = e.weights().iter().zip(&nadirs).map(|(w, x)| w * (x - mean).powi(2)).sum();
            (mean, var / e.ess())
        };
        let (big, v_big) = scale(10_000, 1);
        let (small, v_small) = scale(100, 2);
        let se = (v_big + v_small).sqrt();
        assert!((big - small).abs() < 3.0 * se, "{big} vs {small}, se {se}");
    }
}
