//! Exposure-driven dose adaptation from a configurable rule table.

use serde::{Deserialize, Serialize};

use crate::cohort::{Grade, N_GRADES};
use crate::error::{Error, Result};
use crate::inference::map::{MapConfig, MapParameter, MapProblem};
use crate::pkpd::model::{iiv, iov, PatientCovariates, PopulationModel, Sex};
use crate::pkpd::observe::Observation;
use crate::pkpd::simulate::{uniform_grid, Dose, DoseRegimen, Simulator};
use crate::policies::grid::DoseGrid;

/// Starting dose for patients of one sex inside an age range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstDoseCell {
    pub sex: Sex,
    pub age_min: f64,
    pub age_max: f64,
    pub dose_per_m2: f64,
}

/// Placeholder defaults; the table is meant to be replaced from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PkGuidedRuleTable {
    pub first_dose: Vec<FirstDoseCell>,
    /// Upper edges of the exposure bands in h; band `i` is
    /// `[edge[i-1], edge[i])`, the last band is open.
    pub band_edges: Vec<f64>,
    /// Relative change in percent per previous grade and exposure band.
    pub adjustments: [Vec<f64>; N_GRADES],
    /// Concentration threshold for the exposure measure, µM.
    pub threshold_um: f64,
}

impl Default for PkGuidedRuleTable {
    fn default() -> Self {
        let cell = |sex, age_min, age_max, dose_per_m2| FirstDoseCell {
            sex,
            age_min,
            age_max,
            dose_per_m2,
        };
        Self {
            first_dose: vec![
                cell(Sex::Male, 0.0, 60.0, 220.0),
                cell(Sex::Male, 60.0, 150.0, 198.0),
                cell(Sex::Female, 0.0, 60.0, 200.0),
                cell(Sex::Female, 60.0, 150.0, 180.0),
            ],
            band_edges: vec![26.0, 31.0],
            adjustments: [
                vec![30.0, 20.0, 0.0],
                vec![20.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0],
                vec![0.0, 0.0, -20.0],
                vec![-20.0, -20.0, -20.0],
            ],
            threshold_um: 0.05,
        }
    }
}

impl PkGuidedRuleTable {
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.band_edges.windows(2).any(|w| !(w[1] > w[0])) || self.band_edges.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::InvalidInput("exposure band edges must be positive and increasing".into()));
        }
        let bands = self.band_edges.len() + 1;
        if let Some(row) = self.adjustments.iter().find(|r| r.len() != bands) {
            return Err(Error::Dimension { what: "adjustment row", expected: bands, got: row.len() });
        }
        if self.adjustments.iter().flatten().any(|a| !(*a > -100.0) || !a.is_finite()) {
            return Err(Error::InvalidInput("adjustments must be finite and above -100 %".into()));
        }
        if !(self.threshold_um > 0.0) {
            return Err(Error::InvalidInput("exposure threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn band(&self, exposure_h: f64) -> usize {
        self.band_edges.partition_point(|&e| e <= exposure_h)
    }

    pub fn first_dose(&self, cov: &PatientCovariates) -> Result<f64> {
        self.first_dose
            .iter()
            .find(|c| c.sex == cov.sex && c.age_min <= cov.age && cov.age < c.age_max)
            .map(|c| c.dose_per_m2)
            .ok_or_else(|| Error::InvalidInput(format!("no first-dose cell for {:?}, age {}", cov.sex, cov.age)))
    }

    /// Dose in mg/m² for cycle `cycle` (1-based).
    pub fn dose(
        &self,
        cycle: usize,
        cov: &PatientCovariates,
        previous_per_m2: Option<f64>,
        previous_grade: Option<Grade>,
        exposure_h: Option<f64>,
        grid: &DoseGrid,
    ) -> Result<f64> {
        if cycle <= 1 {
            return Ok(grid.clamp(self.first_dose(cov)?));
        }
        let exposure = exposure_h.ok_or(Error::MissingExposure { cycle })?;
        let prev = previous_per_m2.ok_or_else(|| Error::MissingPrerequisite("previous dose".into()))?;
        let g = previous_grade.ok_or_else(|| Error::MissingPrerequisite("previous grade".into()))?;
        let change = self.adjustments[g as usize][self.band(exposure)];
        Ok(grid.clamp(prev * (1.0 + change / 100.0)))
    }
}

/// Time above `threshold_um` during the cycle that starts with `dose`,
/// from PK parameters estimated on the drug observations of that cycle.
pub fn estimate_exposure(
    model: &PopulationModel,
    cov: &PatientCovariates,
    doses: &[Dose],
    drug_obs: &[Observation],
    cycle_start: f64,
    cycle_length: f64,
    threshold_um: f64,
) -> Result<f64> {
    let occasion = (cycle_start / cycle_length).round() as usize;
    let config = MapConfig {
        free: vec![
            MapParameter::Eta(iiv::VM_EL),
            MapParameter::Kappa { occasion, index: iov::VM_EL },
        ],
        ..MapConfig::default()
    };
    let mut problem = MapProblem::new(model, cov, doses, drug_obs, &config);
    problem.cycle_length = cycle_length;
    let est = problem.estimate(None)?;
    let end = cycle_start + cycle_length;
    let regimen = DoseRegimen {
        doses: doses.iter().copied().filter(|d| d.time < end).collect(),
        cycle_length,
        cycles: occasion + 1,
    };
    let grid = uniform_grid(cycle_start, end, 0.5);
    let sim = Simulator::<f64>::new(config.solver);
    let traj = sim.simulate(model, &est.params, &regimen, &grid)?;
    Ok(traj.exposure_time_above(threshold_um, cycle_start, end))
}
