//! Rewards, utility and risk weights used to score nadirs and grades.

use serde::{Deserialize, Serialize};

use crate::cohort::{Grade, N_GRADES};
use crate::error::{Error, Result};

/// Piecewise-linear utility of a nadir, constant outside the knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityCurve {
    /// `(nadir, utility)` knots with strictly increasing nadir.
    pub knots: Vec<[f64; 2]>,
}

impl Default for UtilityCurve {
    fn default() -> Self {
        Self {
            knots: vec![[0.0, -2.0], [0.5, 1.0], [2.0, 1.0], [4.0, -1.0]],
        }
    }
}

impl UtilityCurve {
    pub fn validate(&self) -> Result<()> {
        if self.knots.is_empty()
            || self.knots.windows(2).any(|w| !(w[1][0] > w[0][0]))
            || self.knots.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput("utility knots must be finite and strictly increasing".into()));
        }
        Ok(())
    }

    pub fn eval(&self, nadir: f64) -> f64 {
        let k = &self.knots;
        if nadir <= k[0][0] {
            return k[0][1];
        }
        for w in k.windows(2) {
            let ([x0, y0], [x1, y1]) = (w[0], w[1]);
            if nadir <= x1 {
                return y0 + (y1 - y0) * (nadir - x0) / (x1 - x0);
            }
        }
        k[k.len() - 1][1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    /// Reward for grades 0..4.
    pub grade_rewards: [f64; N_GRADES],
    pub utility: UtilityCurve,
    /// Target nadir, 10⁹ cells/L.
    pub target_nadir: f64,
    /// Weight on the probability of grade 0.
    pub lambda0: f64,
    /// Weight on the probability of grade 4.
    pub lambda4: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            grade_rewards: [-1.0, 1.0, 1.0, 1.0, -2.0],
            utility: UtilityCurve::default(),
            target_nadir: 1.0,
            lambda0: 1.0 / 3.0,
            lambda4: 2.0 / 3.0,
        }
    }
}

impl RewardSpec {
    /// Default spec with a different grade-4 reward.
    pub fn with_grade4_reward(r: f64) -> Self {
        let mut s = Self::default();
        s.grade_rewards[4] = r;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.grade_rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidInput("rewards must be finite".into()));
        }
        if !(self.lambda0 >= 0.0 && self.lambda4 >= 0.0 && (self.lambda0 + self.lambda4 - 1.0).abs() < 1e-12) {
            return Err(Error::InvalidInput("risk weights must be non-negative and sum to 1".into()));
        }
        if !(self.target_nadir > 0.0) {
            return Err(Error::InvalidInput("target nadir must be positive".into()));
        }
        self.utility.validate()
    }

    pub fn reward(&self, g: Grade) -> f64 {
        self.grade_rewards[g as usize]
    }

    /// Smallest and largest single-step reward.
    pub fn bounds(&self) -> (f64, f64) {
        let lo = self.grade_rewards.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.grade_rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn utility(&self, nadir: f64) -> f64 {
        self.utility.eval(nadir)
    }

    pub fn target_loss(&self, nadir: f64) -> f64 {
        (nadir - self.target_nadir).powi(2)
    }

    pub fn risk(&self, p_grade0: f64, p_grade4: f64) -> f64 {
        self.lambda0 * p_grade0 + self.lambda4 * p_grade4
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rewards() {
        let s = RewardSpec::default();
        s.validate().unwrap();
        assert_eq!(s.reward(4), -2.0);
        assert_eq!(s.reward(2), 1.0);
        assert_eq!(s.reward(0), -1.0);
        assert_eq!(RewardSpec::with_grade4_reward(-3.0).reward(4), -3.0);
        assert_eq!(s.bounds(), (-2.0, 1.0));
    }

    #[test]
    fn utility_curve_shape() {
        let s = RewardSpec::default();
        assert_eq!(s.utility(0.0), -2.0);
        assert_eq!(s.utility(0.25), -0.5);
        assert_eq!(s.utility(0.5), 1.0);
        assert_eq!(s.utility(1.3), 1.0);
        assert_eq!(s.utility(3.0), 0.0);
        assert_eq!(s.utility(10.0), -1.0);
        assert_eq!(s.target_loss(1.0), 0.0);
    }

    #[test]
    fn risk_weights() {
        let s = RewardSpec::default();
        assert!((s.risk(0.2, 0.1) - 0.4 / 3.0).abs() < 1e-15);
        let bad = RewardSpec { lambda0: 0.5, ..RewardSpec::default() };
        assert!(bad.validate().is_err());
    }
}
