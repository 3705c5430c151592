//! Population model, covariates and the mapping from random effects to
//! per-occasion individual parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower inclusion limit on the pre-treatment neutrophil count (10⁹ cells/L).
pub const ANC0_INCLUSION: f64 = 1.5;

/// Number of inter-individual random effects: V3, VM_EL, KM_TR, VM_TR, k21, Q, Slope.
pub const IIV_DIM: usize = 7;
/// Number of inter-occasion random effects: V1, VM_EL.
pub const IOV_DIM: usize = 2;

pub mod iiv {
    pub const V3: usize = 0;
    pub const VM_EL: usize = 1;
    pub const KM_TR: usize = 2;
    pub const VM_TR: usize = 3;
    pub const K21: usize = 4;
    pub const Q: usize = 5;
    pub const SLOPE: usize = 6;
}

pub mod iov {
    pub const V1: usize = 0;
    pub const VM_EL: usize = 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn indicator(self) -> f64 {
        match self {
            Sex::Female => 0.0,
            Sex::Male => 1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Sex::Female => 0,
            Sex::Male => 1,
        }
    }
}

impl TryFrom<u8> for Sex {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, Self::Error> {
        match v {
            0 => Ok(Sex::Female),
            1 => Ok(Sex::Male),
            other => Err(format!("sex must be 0 (female) or 1 (male), got {other}")),
        }
    }
}

impl From<Sex> for u8 {
    fn from(s: Sex) -> u8 {
        s.index() as u8
    }
}

/// Patient covariates. `anc0` is the pre-treatment baseline observation y₀.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientCovariates {
    pub sex: Sex,
    /// years
    pub age: f64,
    /// m²
    pub bsa: f64,
    /// µmol/L
    pub bili: f64,
    /// 10⁹ cells/L
    pub anc0: f64,
}

impl PatientCovariates {
    pub fn reference() -> Self {
        Self {
            sex: Sex::Female,
            age: 56.0,
            bsa: 1.8,
            bili: 7.0,
            anc0: 5.0,
        }
    }

    /// Checks the covariate domain, reporting the first offending field.
    pub fn validate(&self) -> Result<()> {
        let positive = [("age", self.age), ("bsa", self.bsa), ("bili", self.bili)];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidCovariate {
                    field,
                    reason: format!("must be a positive number, got {v}"),
                });
            }
        }
        if !(self.anc0.is_finite() && self.anc0 >= ANC0_INCLUSION) {
            return Err(Error::InvalidCovariate {
                field: "anc0",
                reason: format!(
                    "inclusion criterion ANC0 >= {ANC0_INCLUSION} x10^9 cells/L violated, got {}",
                    self.anc0
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkConstants {
    /// L
    pub v1: f64,
    /// L
    pub v3: f64,
    /// µM
    pub km_el: f64,
    /// µmol/h
    pub vm_el_pop: f64,
    /// µM
    pub km_tr: f64,
    /// µmol/h
    pub vm_tr: f64,
    /// 1/h
    pub k21: f64,
    /// Inter-compartmental flow, L/h (k13 = Q/V1, k31 = Q/V3).
    pub q: f64,
}

/// Exponents of the covariate model on VM_EL.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovariateEffects {
    pub bsa: f64,
    /// Multiplicative factor for male patients.
    pub sex: f64,
    pub age: f64,
    pub bili: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkIiv {
    pub v3: f64,
    pub vm_el: f64,
    pub km_tr: f64,
    pub vm_tr: f64,
    pub k21: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PkIov {
    pub v1: f64,
    pub vm_el: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdConstants {
    /// Mean transit time, h.
    pub mtt: f64,
    /// Linear drug effect, 1/µM.
    pub slope: f64,
    /// Feedback exponent.
    pub gamma_fb: f64,
    /// Fraction of proliferating-cell input via replication.
    pub ftr: f64,
}

/// Structural, covariate and statistical constants of the paclitaxel PK model
/// and the bone-marrow-exhaustion neutropenia model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationModel {
    pub pk: PkConstants,
    pub covariates: CovariateEffects,
    pub omega2: PkIiv,
    pub pi2: PkIov,
    pub sigma2_pk: f64,
    pub pd: PdConstants,
    pub omega2_slope: f64,
    pub sigma2_pd: f64,
    /// g/mol, used to convert mg doses into µmol.
    pub molecular_weight: f64,
}

impl Default for PopulationModel {
    fn default() -> Self {
        Self {
            pk: PkConstants {
                v1: 10.8,
                v3: 301.0,
                km_el: 0.667,
                vm_el_pop: 35.9,
                km_tr: 1.44,
                vm_tr: 175.0,
                k21: 1.12,
                q: 16.8,
            },
            covariates: CovariateEffects {
                bsa: 1.14,
                sex: 1.07,
                age: -0.447,
                bili: -0.0942,
            },
            omega2: PkIiv {
                v3: 0.1639,
                vm_el: 0.0253,
                km_tr: 0.3885,
                vm_tr: 0.077,
                k21: 0.008,
                q: 0.1660,
            },
            pi2: PkIov {
                v1: 0.1391,
                vm_el: 0.0231,
            },
            sigma2_pk: 0.0317,
            pd: PdConstants {
                mtt: 145.0,
                slope: 13.1,
                gamma_fb: 0.257,
                ftr: 0.787,
            },
            omega2_slope: 0.2007,
            sigma2_pd: 0.2652,
            molecular_weight: 853.906,
        }
    }
}

/// Shipped default constants as a JSON document.
pub const DEFAULT_MODEL_JSON: &str = include_str!("../../data/population_model.json");

impl PopulationModel {
    pub fn from_json(text: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let structural = [
            ("pk.v1", self.pk.v1),
            ("pk.v3", self.pk.v3),
            ("pk.km_el", self.pk.km_el),
            ("pk.vm_el_pop", self.pk.vm_el_pop),
            ("pk.km_tr", self.pk.km_tr),
            ("pk.vm_tr", self.pk.vm_tr),
            ("pk.k21", self.pk.k21),
            ("pk.q", self.pk.q),
            ("pd.mtt", self.pd.mtt),
            ("pd.slope", self.pd.slope),
            ("pd.gamma_fb", self.pd.gamma_fb),
            ("pd.ftr", self.pd.ftr),
            ("molecular_weight", self.molecular_weight),
        ];
        for (name, v) in structural {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidModel(format!("{name} must be > 0, got {v}")));
            }
        }
        let variances = self
            .iiv_variances()
            .into_iter()
            .chain(self.iov_variances())
            .chain([self.sigma2_pk, self.sigma2_pd]);
        for v in variances {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidModel(format!("variance must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Diagonal of Ω in random-effect order (see [`iiv`]).
    /// Same model with every between- and within-subject variance set to 0.
    /// Residual errors are kept.
    pub fn without_variability(&self) -> Self {
        Self {
            omega2: PkIiv {
                v3: 0.0,
                vm_el: 0.0,
                km_tr: 0.0,
                vm_tr: 0.0,
                k21: 0.0,
                q: 0.0,
            },
            pi2: PkIov { v1: 0.0, vm_el: 0.0 },
            omega2_slope: 0.0,
            ..self.clone()
        }
    }

    pub fn iiv_variances(&self) -> [f64; IIV_DIM] {
        let o = &self.omega2;
        [o.v3, o.vm_el, o.km_tr, o.vm_tr, o.k21, o.q, self.omega2_slope]
    }

    /// Diagonal of Π in random-effect order (see [`iov`]).
    pub fn iov_variances(&self) -> [f64; IOV_DIM] {
        [self.pi2.v1, self.pi2.vm_el]
    }

    pub fn sigma_pd(&self) -> f64 {
        self.sigma2_pd.sqrt()
    }

    pub fn sigma_pk(&self) -> f64 {
        self.sigma2_pk.sqrt()
    }

    /// Typical maximum elimination capacity for the given covariates, µmol/h.
    pub fn typical_vmel(&self, cov: &PatientCovariates) -> Result<f64> {
        for (field, v) in [("age", cov.age), ("bsa", cov.bsa), ("bili", cov.bili)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidCovariate {
                    field,
                    reason: format!("must be a positive number, got {v}"),
                });
            }
        }
        let c = &self.covariates;
        Ok(self.pk.vm_el_pop
            * (cov.bsa / 1.8).powf(c.bsa)
            * c.sex.powf(cov.sex.indicator())
            * (cov.age / 56.0).powf(c.age)
            * (cov.bili / 7.0).powf(c.bili))
    }

    /// mg → µmol.
    pub fn mg_to_umol(&self, mg: f64) -> f64 {
        mg * 1000.0 / self.molecular_weight
    }

    /// Maps random effects onto per-occasion parameters.
    ///
    /// `kappa` holds one IOV vector per occasion; `eta_circ0` is the standard
    /// normal baseline effect, `Circ₀ = y₀·exp(σ_PD·η_Circ0)`.
    pub fn individualize(
        &self,
        cov: &PatientCovariates,
        eta: &[f64],
        kappa: &[Vec<f64>],
        eta_circ0: f64,
    ) -> Result<IndividualParameters> {
        if eta.len() != IIV_DIM {
            return Err(Error::Dimension {
                what: "eta",
                expected: IIV_DIM,
                got: eta.len(),
            });
        }
        let mut kap = Vec::with_capacity(kappa.len());
        for k in kappa {
            if k.len() != IOV_DIM {
                return Err(Error::Dimension {
                    what: "kappa",
                    expected: IOV_DIM,
                    got: k.len(),
                });
            }
            kap.push([k[0], k[1]]);
        }
        let mut e = [0.0; IIV_DIM];
        e.copy_from_slice(eta);
        IndividualParameters::new(self, cov, e, kap, eta_circ0)
    }
}

/// Individual random effects together with the covariate-adjusted typical
/// values they act on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualParameters {
    pub eta: [f64; IIV_DIM],
    /// One IOV vector per occasion (cycle).
    pub kappa: Vec<[f64; IOV_DIM]>,
    pub eta_circ0: f64,
    pub circ0: f64,
    pub typical: TypicalValues,
}

/// Covariate-adjusted typical parameter values θ^TV(cov).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TypicalValues {
    pub v1: f64,
    pub v3: f64,
    pub km_el: f64,
    pub vm_el: f64,
    pub km_tr: f64,
    pub vm_tr: f64,
    pub k21: f64,
    pub q: f64,
    pub mtt: f64,
    pub slope: f64,
    pub gamma_fb: f64,
    pub ftr: f64,
}

/// Parameter values in effect during one occasion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccasionParams {
    pub v1: f64,
    pub v3: f64,
    pub km_el: f64,
    pub vm_el: f64,
    pub km_tr: f64,
    pub vm_tr: f64,
    pub k21: f64,
    pub q: f64,
    pub mtt: f64,
    pub slope: f64,
    pub gamma_fb: f64,
    pub ftr: f64,
    pub circ0: f64,
}

impl TypicalValues {
    pub fn for_covariates(model: &PopulationModel, cov: &PatientCovariates) -> Result<Self> {
        Ok(Self {
            v1: model.pk.v1,
            v3: model.pk.v3,
            km_el: model.pk.km_el,
            vm_el: model.typical_vmel(cov)?,
            km_tr: model.pk.km_tr,
            vm_tr: model.pk.vm_tr,
            k21: model.pk.k21,
            q: model.pk.q,
            mtt: model.pd.mtt,
            slope: model.pd.slope,
            gamma_fb: model.pd.gamma_fb,
            ftr: model.pd.ftr,
        })
    }
}

impl IndividualParameters {
    pub fn new(
        model: &PopulationModel,
        cov: &PatientCovariates,
        eta: [f64; IIV_DIM],
        kappa: Vec<[f64; IOV_DIM]>,
        eta_circ0: f64,
    ) -> Result<Self> {
        let typical = TypicalValues::for_covariates(model, cov)?;
        if !(cov.anc0.is_finite() && cov.anc0 > 0.0) {
            return Err(Error::InvalidCovariate {
                field: "anc0",
                reason: format!("baseline must be positive, got {}", cov.anc0),
            });
        }
        let circ0 = cov.anc0 * (model.sigma_pd() * eta_circ0).exp();
        Ok(Self {
            eta,
            kappa,
            eta_circ0,
            circ0,
            typical,
        })
    }

    /// Typical-value patient: all random effects zero.
    pub fn typical(model: &PopulationModel, cov: &PatientCovariates, occasions: usize) -> Result<Self> {
        Self::new(model, cov, [0.0; IIV_DIM], vec![[0.0; IOV_DIM]; occasions], 0.0)
    }

    pub fn occasions(&self) -> usize {
        self.kappa.len()
    }

    /// θ_{i,c} = θ^TV · exp(η + κ_c). Occasions beyond the stored IOV
    /// vectors use κ = 0.
    pub fn occasion(&self, c: usize) -> OccasionParams {
        let tv = &self.typical;
        let e = &self.eta;
        let k = self.kappa.get(c).copied().unwrap_or([0.0; IOV_DIM]);
        OccasionParams {
            v1: tv.v1 * k[iov::V1].exp(),
            v3: tv.v3 * e[iiv::V3].exp(),
            km_el: tv.km_el,
            vm_el: tv.vm_el * (e[iiv::VM_EL] + k[iov::VM_EL]).exp(),
            km_tr: tv.km_tr * e[iiv::KM_TR].exp(),
            vm_tr: tv.vm_tr * e[iiv::VM_TR].exp(),
            k21: tv.k21 * e[iiv::K21].exp(),
            q: tv.q * e[iiv::Q].exp(),
            mtt: tv.mtt,
            slope: tv.slope * e[iiv::SLOPE].exp(),
            gamma_fb: tv.gamma_fb,
            ftr: tv.ftr,
            circ0: self.circ0,
        }
    }

    /// Same patient with baseline recomputed for a new `eta_circ0`.
    pub fn with_eta_circ0(&self, model: &PopulationModel, anc0: f64, eta_circ0: f64) -> Self {
        Self {
            eta_circ0,
            circ0: anc0 * (model.sigma_pd() * eta_circ0).exp(),
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cov(sex: Sex, bili: f64) -> PatientCovariates {
        PatientCovariates {
            sex,
            bili,
            ..PatientCovariates::reference()
        }
    }

    #[test]
    fn typical_vmel_reference_values() {
        let m = PopulationModel::default();
        assert_relative_eq!(m.typical_vmel(&cov(Sex::Female, 7.0)).unwrap(), 35.9, epsilon = 1e-12);
        assert_relative_eq!(
            m.typical_vmel(&cov(Sex::Male, 7.0)).unwrap(),
            38.413,
            epsilon = 1e-9
        );
        let doubled_bili = m.typical_vmel(&cov(Sex::Female, 14.0)).unwrap();
        assert_relative_eq!(doubled_bili, 35.9 * 2f64.powf(-0.0942), epsilon = 1e-12);
        assert!((doubled_bili - 33.63).abs() < 0.005);
    }

    #[test]
    fn typical_vmel_rejects_nonpositive_covariates() {
        let m = PopulationModel::default();
        let mut c = PatientCovariates::reference();
        c.bsa = 0.0;
        assert!(matches!(
            m.typical_vmel(&c),
            Err(Error::InvalidCovariate { field: "bsa", .. })
        ));
        c.bsa = 1.8;
        c.age = -3.0;
        assert!(m.typical_vmel(&c).is_err());
    }

    #[test]
    fn zero_effects_give_typical_values() {
        let m = PopulationModel::default();
        let c = PatientCovariates::reference();
        let p = m.individualize(&c, &[0.0; 7], &vec![vec![0.0, 0.0]; 6], 0.0).unwrap();
        let occ = p.occasion(3);
        assert_eq!(occ.v1, 10.8);
        assert_eq!(occ.v3, 301.0);
        assert_eq!(occ.vm_el, 35.9);
        assert_eq!(occ.slope, 13.1);
        assert_eq!(occ.mtt, 145.0);
        assert_eq!(p.circ0, c.anc0);
    }

    #[test]
    fn exponential_link_on_iiv_and_iov() {
        let m = PopulationModel::default();
        let c = PatientCovariates::reference();
        let mut eta = [0.0; 7];
        eta[iiv::VM_EL] = 2f64.ln();
        let p = m.individualize(&c, &eta, &vec![vec![0.0, 0.0]; 6], 0.0).unwrap();
        for cyc in 0..6 {
            assert_relative_eq!(p.occasion(cyc).vm_el, 71.8, epsilon = 1e-12);
        }

        let mut kappa = vec![vec![0.0, 0.0]; 6];
        kappa[1][iov::V1] = 2f64.ln();
        let p = m.individualize(&c, &[0.0; 7], &kappa, 0.0).unwrap();
        for cyc in 0..6 {
            let expect = if cyc == 1 { 21.6 } else { 10.8 };
            assert_relative_eq!(p.occasion(cyc).v1, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = PopulationModel::default();
        let c = PatientCovariates::reference();
        let err = m.individualize(&c, &[0.0; 6], &[], 0.0).unwrap_err();
        assert!(matches!(err, Error::Dimension { what: "eta", expected: 7, got: 6 }));
        let err = m.individualize(&c, &[0.0; 7], &[vec![0.0]], 0.0).unwrap_err();
        assert!(matches!(err, Error::Dimension { what: "kappa", .. }));
    }

    #[test]
    fn baseline_uses_pd_residual_sigma() {
        let m = PopulationModel::default();
        let c = PatientCovariates::reference();
        let p = m.individualize(&c, &[0.0; 7], &[], 1.0).unwrap();
        assert_relative_eq!(p.circ0, 5.0 * 0.2652f64.sqrt().exp(), epsilon = 1e-12);
    }

    #[test]
    fn shipped_json_matches_defaults() {
        let parsed = PopulationModel::from_json(DEFAULT_MODEL_JSON).unwrap();
        assert_eq!(parsed, PopulationModel::default());
    }

    #[test]
    fn covariate_validation() {
        let mut c = PatientCovariates::reference();
        assert!(c.validate().is_ok());
        c.anc0 = 1.0;
        match c.validate() {
            Err(Error::InvalidCovariate { field, reason }) => {
                assert_eq!(field, "anc0");
                assert!(reason.contains("inclusion"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sex_serializes_as_binary_indicator() {
        let c = PatientCovariates::reference();
        let text = serde_json::to_string(&c).unwrap();
        assert!(text.contains("\"sex\":0"));
        assert!(serde_json::from_str::<Sex>("2").is_err());
    }
}
