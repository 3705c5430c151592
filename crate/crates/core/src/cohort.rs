//! Virtual patients, covariate classes, neutropenia grading and the discrete
//! patient-state encoding used by the planners.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pkpd::model::{
    IndividualParameters, PatientCovariates, PopulationModel, Sex, IIV_DIM, IOV_DIM,
};

pub const N_GRADES: usize = 5;
/// Treatment cycles per patient; grade histories never exceed this length.
pub const MAX_CYCLES: usize = 6;
pub const N_SEX: usize = 2;
pub const N_AGE_BINS: usize = 4;
pub const N_ANC0_BINS: usize = 4;
pub const N_CLASSES: usize = N_SEX * N_AGE_BINS * N_ANC0_BINS;

/// Σ_{m=0}^{5} 5^m: grade histories of length 0..5 per class.
pub const DECISION_STATES_PER_CLASS: usize = depth_offset(MAX_CYCLES);
/// Σ_{m=0}^{6} 5^m: including complete (leaf) histories.
pub const STATES_PER_CLASS: usize = depth_offset(MAX_CYCLES + 1);
pub const DECISION_STATES: usize = DECISION_STATES_PER_CLASS * N_CLASSES;
pub const TOTAL_STATES: usize = STATES_PER_CLASS * N_CLASSES;

pub type Grade = u8;

/// Number of histories shorter than `depth`: Σ_{i<depth} 5^i.
pub const fn depth_offset(depth: usize) -> usize {
    let mut sum = 0;
    let mut p = 1;
    let mut i = 0;
    while i < depth {
        sum += p;
        p *= N_GRADES;
        i += 1;
    }
    sum
}

/// Descending ANC thresholds (10⁹ cells/L); a value below `thresholds[k]`
/// has grade at least `k + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradeScale {
    pub thresholds: [f64; N_GRADES - 1],
}

impl Default for GradeScale {
    fn default() -> Self {
        Self {
            thresholds: [2.0, 1.5, 1.0, 0.5],
        }
    }
}

impl GradeScale {
    pub fn validate(&self) -> Result<()> {
        let ok = self.thresholds.windows(2).all(|w| w[0] > w[1])
            && self.thresholds.iter().all(|t| t.is_finite() && *t > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("grade thresholds must be positive and strictly decreasing".into()))
        }
    }

    /// Grade of a nadir or observed ANC; intervals are closed at the lower end.
    pub fn grade_of(&self, anc: f64) -> Result<Grade> {
        if !(anc >= 0.0) {
            return Err(Error::Domain(format!("ANC must be non-negative, got {anc}")));
        }
        Ok(self.grade_unchecked(anc))
    }

    #[inline]
    pub fn grade_unchecked(&self, anc: f64) -> Grade {
        self.thresholds.iter().filter(|&&t| anc < t).count() as Grade
    }
}

/// Grade under the default CTCAE thresholds.
pub fn grade_of(anc: f64) -> Result<Grade> {
    GradeScale::default().grade_of(anc)
}

/// Bin edges for the covariate classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBins {
    pub age: [f64; N_AGE_BINS + 1],
    pub anc0: [f64; N_ANC0_BINS + 1],
}

impl Default for ClassBins {
    fn default() -> Self {
        Self {
            age: [18.0, 50.0, 60.0, 70.0, 100.0],
            anc0: [1.5, 2.5, 5.0, 10.0, 25.0],
        }
    }
}

fn bin_of(edges: &[f64], v: f64) -> Option<usize> {
    if v < edges[0] || v >= edges[edges.len() - 1] {
        return None;
    }
    Some(edges.partition_point(|&e| e <= v) - 1)
}

impl ClassBins {
    pub fn class_of(&self, cov: &PatientCovariates) -> Result<CovariateClass> {
        let age_bin = bin_of(&self.age, cov.age).ok_or_else(|| Error::InvalidCovariate {
            field: "age",
            reason: format!("{} outside class range [{}, {})", cov.age, self.age[0], self.age[N_AGE_BINS]),
        })?;
        let anc0_bin = bin_of(&self.anc0, cov.anc0).ok_or_else(|| Error::InvalidCovariate {
            field: "anc0",
            reason: format!(
                "{} outside class range [{}, {})",
                cov.anc0, self.anc0[0], self.anc0[N_ANC0_BINS]
            ),
        })?;
        Ok(CovariateClass {
            sex: cov.sex,
            age_bin,
            anc0_bin,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CovariateClass {
    pub sex: Sex,
    pub age_bin: usize,
    pub anc0_bin: usize,
}

impl CovariateClass {
    pub fn index(&self) -> usize {
        (self.sex.index() * N_AGE_BINS + self.age_bin) * N_ANC0_BINS + self.anc0_bin
    }

    pub fn from_index(l: usize) -> Result<Self> {
        if l >= N_CLASSES {
            return Err(Error::InvalidInput(format!("class index {l} >= {N_CLASSES}")));
        }
        let sex = if l / (N_AGE_BINS * N_ANC0_BINS) == 0 {
            Sex::Female
        } else {
            Sex::Male
        };
        Ok(Self {
            sex,
            age_bin: (l / N_ANC0_BINS) % N_AGE_BINS,
            anc0_bin: l % N_ANC0_BINS,
        })
    }

    pub fn all() -> impl Iterator<Item = CovariateClass> {
        (0..N_CLASSES).map(|l| Self::from_index(l).unwrap())
    }
}

/// Position of a grade history in the per-class state space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Encoded {
    Decision(usize),
    /// Complete history: no further decision.
    Leaf,
}

/// Local (per-class) index of a grade history of length < 6.
pub fn encode_history(grades: &[Grade]) -> Result<Encoded> {
    if grades.len() > MAX_CYCLES {
        return Err(Error::InvalidInput(format!(
            "grade history longer than {MAX_CYCLES} cycles"
        )));
    }
    if let Some(g) = grades.iter().find(|&&g| g as usize >= N_GRADES) {
        return Err(Error::InvalidInput(format!("grade {g} out of range 0..4")));
    }
    if grades.len() == MAX_CYCLES {
        return Ok(Encoded::Leaf);
    }
    let pos = grades.iter().fold(0usize, |acc, &g| acc * N_GRADES + g as usize);
    Ok(Encoded::Decision(depth_offset(grades.len()) + pos))
}

/// Inverse of [`encode_history`] for decision states.
pub fn decode_history(local: usize) -> Result<Vec<Grade>> {
    if local >= DECISION_STATES_PER_CLASS {
        return Err(Error::InvalidInput(format!(
            "local state {local} >= {DECISION_STATES_PER_CLASS}"
        )));
    }
    let mut depth = 0;
    while depth_offset(depth + 1) <= local {
        depth += 1;
    }
    let mut pos = local - depth_offset(depth);
    let mut grades = vec![0; depth];
    for slot in grades.iter_mut().rev() {
        *slot = (pos % N_GRADES) as Grade;
        pos /= N_GRADES;
    }
    Ok(grades)
}

/// Local index of the child of decision state `local` at `depth` after grade `g`.
pub fn child_index(local: usize, depth: usize, g: Grade) -> usize {
    depth_offset(depth + 1) + (local - depth_offset(depth)) * N_GRADES + g as usize
}

/// Patient state s_c: covariate class plus observed or estimated grade history.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PatientState {
    pub class: CovariateClass,
    pub grades: Vec<Grade>,
}

impl PatientState {
    pub fn new(class: CovariateClass) -> Self {
        Self {
            class,
            grades: Vec::new(),
        }
    }

    pub fn with_grade(&self, g: Grade) -> Self {
        let mut grades = self.grades.clone();
        grades.push(g);
        Self {
            class: self.class,
            grades,
        }
    }

    pub fn cycle(&self) -> usize {
        self.grades.len()
    }

    pub fn local_index(&self) -> Result<Encoded> {
        encode_history(&self.grades)
    }

    /// Global decision-state index `class·3906 + local`.
    pub fn encode(&self) -> Result<Encoded> {
        Ok(match encode_history(&self.grades)? {
            Encoded::Decision(local) => {
                Encoded::Decision(self.class.index() * DECISION_STATES_PER_CLASS + local)
            }
            Encoded::Leaf => Encoded::Leaf,
        })
    }

    pub fn decode(global: usize) -> Result<Self> {
        if global >= DECISION_STATES {
            return Err(Error::InvalidInput(format!("state {global} >= {DECISION_STATES}")));
        }
        Ok(Self {
            class: CovariateClass::from_index(global / DECISION_STATES_PER_CLASS)?,
            grades: decode_history(global % DECISION_STATES_PER_CLASS)?,
        })
    }
}

/// Covariate sampling distributions within a class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub bins: ClassBins,
    pub bsa_mean: f64,
    pub bsa_sd: f64,
    pub bsa_bounds: [f64; 2],
    pub bili_median: f64,
    pub bili_gsd: f64,
    pub cycles: usize,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            bins: ClassBins::default(),
            bsa_mean: 1.8,
            bsa_sd: 0.2,
            bsa_bounds: [1.4, 2.4],
            bili_median: 7.0,
            bili_gsd: 1.3,
            cycles: MAX_CYCLES,
        }
    }
}

/// A sampled "true" patient. Replayable bit-exactly from its JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualPatient {
    pub covariates: PatientCovariates,
    pub eta: [f64; IIV_DIM],
    pub kappa: Vec<[f64; IOV_DIM]>,
    pub eta_circ0: f64,
}

impl VirtualPatient {
    pub fn parameters(&self, model: &PopulationModel) -> Result<IndividualParameters> {
        IndividualParameters::new(model, &self.covariates, self.eta, self.kappa.clone(), self.eta_circ0)
    }

    pub fn y0(&self) -> f64 {
        self.covariates.anc0
    }
}

/// Draws N(0, var) for each variance; zero variance yields exactly 0.
pub fn sample_effects<R: Rng + ?Sized, const D: usize>(variances: &[f64; D], rng: &mut R) -> [f64; D] {
    let mut out = [0.0; D];
    for (o, &v) in out.iter_mut().zip(variances) {
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        *o = if v > 0.0 { v.sqrt() * z } else { 0.0 };
    }
    out
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let edges_ok = |e: &[f64]| e.windows(2).all(|w| w[0] < w[1]);
        if !edges_ok(&self.bins.age) || !edges_ok(&self.bins.anc0) {
            return Err(Error::InvalidInput("bin edges must be strictly increasing".into()));
        }
        if !(self.bsa_sd >= 0.0 && self.bsa_bounds[0] < self.bsa_bounds[1] && self.bili_gsd >= 1.0) {
            return Err(Error::InvalidInput("invalid covariate distribution parameters".into()));
        }
        Ok(())
    }

    /// Samples covariates inside `class` and random effects from the prior.
    pub fn sample_patient<R: Rng + ?Sized>(
        &self,
        model: &PopulationModel,
        class: &CovariateClass,
        rng: &mut R,
    ) -> VirtualPatient {
        let [a_lo, a_hi] = [self.bins.age[class.age_bin], self.bins.age[class.age_bin + 1]];
        let [n_lo, n_hi] = [self.bins.anc0[class.anc0_bin], self.bins.anc0[class.anc0_bin + 1]];
        let age = rng.random_range(a_lo..a_hi);
        let bsa = self.sample_bsa(rng);
        let bili = LogNormal::new(self.bili_median.ln(), self.bili_gsd.ln())
            .expect("validated lognormal")
            .sample(rng);
        let anc0 = rng.random_range(n_lo..n_hi);
        let covariates = PatientCovariates {
            sex: class.sex,
            age,
            bsa,
            bili,
            anc0,
        };
        self.sample_effects_for(model, covariates, rng)
    }

    /// Samples class uniformly, then a patient inside it.
    pub fn sample_any<R: Rng + ?Sized>(&self, model: &PopulationModel, rng: &mut R) -> VirtualPatient {
        let class = CovariateClass::from_index(rng.random_range(0..N_CLASSES)).unwrap();
        self.sample_patient(model, &class, rng)
    }

    /// Random effects for given covariates.
    pub fn sample_effects_for<R: Rng + ?Sized>(
        &self,
        model: &PopulationModel,
        covariates: PatientCovariates,
        rng: &mut R,
    ) -> VirtualPatient {
        let eta = sample_effects(&model.iiv_variances(), rng);
        let kappa = (0..self.cycles)
            .map(|_| sample_effects(&model.iov_variances(), rng))
            .collect();
        let eta_circ0: f64 = rng.sample(rand_distr::StandardNormal);
        VirtualPatient {
            covariates,
            eta,
            kappa,
            eta_circ0,
        }
    }

    fn sample_bsa<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let [lo, hi] = self.bsa_bounds;
        if self.bsa_sd == 0.0 {
            return self.bsa_mean.clamp(lo, hi);
        }
        let normal = Normal::new(self.bsa_mean, self.bsa_sd).expect("validated normal");
        loop {
            let v = normal.sample(rng);
            if (lo..=hi).contains(&v) {
                return v;
            }
        }
    }
}

/// Writes one JSON object per line.
pub fn write_jsonl<W: Write>(patients: &[VirtualPatient], mut w: W) -> Result<()> {
    for p in patients {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<VirtualPatient>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
