//! The discrete dose grid shared by all policies and planners.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evenly spaced doses in mg/m².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for DoseGrid {
    fn default() -> Self {
        Self {
            min: 60.0,
            max: 250.0,
            step: 5.0,
        }
    }
}

impl DoseGrid {
    pub fn validate(&self) -> Result<()> {
        let n = (self.max - self.min) / self.step;
        if !(self.min > 0.0 && self.step > 0.0 && self.max >= self.min) || (n - n.round()).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "dose grid [{}, {}] step {} is not evenly spaced",
                self.min, self.max, self.step
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.max - self.min) / self.step).round() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Dose level `i` in mg/m².
    pub fn level(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step
    }

    pub fn levels(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.level(i)).collect()
    }

    /// Absolute doses in mg for a patient.
    pub fn levels_mg(&self, bsa: f64) -> Vec<f64> {
        (0..self.len()).map(|i| self.level(i) * bsa).collect()
    }

    /// Index of the level closest to `per_m2` (lower index on ties).
    pub fn nearest_index(&self, per_m2: f64) -> usize {
        let x = ((per_m2 - self.min) / self.step).clamp(0.0, (self.len() - 1) as f64);
        let lo = x.floor();
        if x - lo > 0.5 {
            lo as usize + 1
        } else {
            lo as usize
        }
    }

    pub fn clamp(&self, per_m2: f64) -> f64 {
        per_m2.clamp(self.min, self.max)
    }

    /// Absolute bounds in mg.
    pub fn bounds_mg(&self, bsa: f64) -> (f64, f64) {
        (self.min * bsa, self.max * bsa)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_39_levels() {
        let g = DoseGrid::default();
        g.validate().unwrap();
        assert_eq!(g.len(), 39);
        let l = g.levels();
        assert_eq!(l[0], 60.0);
        assert_eq!(l[38], 250.0);
        assert!(l.windows(2).all(|w| (w[1] - w[0] - 5.0).abs() < 1e-12));
    }

    #[test]
    fn nearest_and_clamp() {
        let g = DoseGrid::default();
        assert_eq!(g.nearest_index(62.5), 0);
        assert_eq!(g.nearest_index(62.6), 1);
        assert_eq!(g.nearest_index(1000.0), 38);
        assert_eq!(g.clamp(10.0), 60.0);
        assert!(DoseGrid { min: 60.0, max: 251.0, step: 5.0 }.validate().is_err());
    }
}
