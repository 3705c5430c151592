//! Fixed starting dose per m² with a 20 % reduction after grade 4.

use serde::{Deserialize, Serialize};

use crate::cohort::Grade;
use crate::policies::grid::DoseGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StandardRule {
    /// mg/m² in the first cycle.
    pub start_per_m2: f64,
    /// Fraction removed after a grade-4 observation.
    pub reduction: f64,
}

impl Default for StandardRule {
    fn default() -> Self {
        Self {
            start_per_m2: 200.0,
            reduction: 0.2,
        }
    }
}

impl StandardRule {
    /// Absolute dose in mg for cycle `cycle` (1-based). Reductions compound
    /// and the dose is never escalated again.
    pub fn dose(&self, cycle: usize, previous_mg: Option<f64>, previous_grade: Option<Grade>, bsa: f64, grid: &DoseGrid) -> f64 {
        let raw = match (cycle, previous_mg) {
            (0 | 1, _) | (_, None) => self.start_per_m2 * bsa,
            (_, Some(prev)) if previous_grade == Some(4) => prev * (1.0 - self.reduction),
            (_, Some(prev)) => prev,
        };
        let (lo, hi) = grid.bounds_mg(bsa);
        raw.clamp(lo, hi)
    }
}
