//! Scalar dose search: grid scan, local refinement, lowest-dose tie-break.

use crate::error::{Error, Result};
use crate::optimize::brent_minimize;

#[derive(Debug, Clone, PartialEq)]
pub struct DoseSearch {
    pub dose_mg: f64,
    pub objective: f64,
    /// Objective at each grid dose.
    pub grid_objective: Vec<f64>,
}

/// Minimizes `f` over `[doses[0], doses[n-1]]`. The grid is scanned first;
/// Brent's method then refines between the neighbours of the best grid
/// point. If refinement does not improve on it, the lowest dose with the
/// same value is located by bisection towards the left neighbour.
pub fn minimize_dose<F>(mut f: F, doses: &[f64], xtol: f64) -> Result<DoseSearch>
where
    F: FnMut(f64) -> Result<f64>,
{
    if doses.is_empty() {
        return Err(Error::InvalidInput("empty dose grid".into()));
    }
    let grid_objective = doses.iter().map(|&d| f(d)).collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (i, v) in grid_objective.iter().enumerate() {
        if *v < grid_objective[best] {
            best = i;
        }
    }
    let v_best = grid_objective[best];
    let lo = doses[best.saturating_sub(1)];
    let hi = doses[(best + 1).min(doses.len() - 1)];
    let mut failure = None;
    let mut eval = |x: f64| match f(x) {
        Ok(v) => v,
        Err(e) => {
            failure.get_or_insert(e);
            f64::INFINITY
        }
    };
    let mut result = (doses[best], v_best);
    if hi > lo {
        let m = brent_minimize(&mut eval, lo, hi, xtol, 100);
        if m.fx < v_best - 1e-12 {
            result = (m.x, m.fx);
        }
    }
    if result.0 == doses[best] && best > 0 {
        let (mut a, mut b) = (doses[best - 1], doses[best]);
        while b - a > xtol {
            let mid = 0.5 * (a + b);
            if eval(mid) <= v_best + 1e-12 {
                b = mid;
            } else {
                a = mid;
            }
        }
        result.0 = b;
    }
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(DoseSearch {
        dose_mg: result.0,
        objective: result.1,
        grid_objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refines_smooth_minimum() {
        let doses: Vec<f64> = (0..39).map(|i| 60.0 + 5.0 * i as f64).collect();
        let r = minimize_dose(|d| Ok((d - 132.3).powi(2)), &doses, 1e-4).unwrap();
        assert!((r.dose_mg - 132.3).abs() < 1e-3);
    }

    #[test]
    fn plateau_returns_its_lowest_dose() {
        let doses: Vec<f64> = (0..39).map(|i| 60.0 + 5.0 * i as f64).collect();
        let f = |d: f64| Ok(if (101.7..=180.0).contains(&d) { -1.0 } else { 0.0 });
        let r = minimize_dose(f, &doses, 1e-3).unwrap();
        assert!((r.dose_mg - 101.7).abs() < 2e-3, "{}", r.dose_mg);
        let flat = minimize_dose(|_| Ok(0.5), &doses, 1e-3).unwrap();
        assert_eq!(flat.dose_mg, 60.0);
    }
}
