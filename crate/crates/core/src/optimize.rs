//! Derivative-free optimizers: Brent's bounded scalar minimizer, Brent–Dekker
//! root bracketing and a box-constrained Nelder–Mead simplex.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minimum<T> {
    pub x: T,
    pub fx: T,
    pub evaluations: usize,
    pub converged: bool,
}

/// Minimizes `f` on `[a, b]` by golden-section search with parabolic
/// interpolation. `tol` is the absolute tolerance on `x`.
pub fn brent_minimize<T: Real, F: FnMut(T) -> T>(
    mut f: F,
    a: T,
    b: T,
    tol: T,
    max_iter: usize,
) -> Minimum<T> {
    let (mut a, mut b) = if a <= b { (a, b) } else { (b, a) };
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let golden = T::lit(0.381_966_011_250_105_1);
    let eps = T::epsilon().sqrt();

    let mut x = a + golden * (b - a);
    let mut w = x;
    let mut v = x;
    let mut fx = f(x);
    let mut fw = fx;
    let mut fv = fx;
    let mut d = T::zero();
    let mut e = T::zero();
    let mut evaluations = 1;

    for _ in 0..max_iter {
        let m = half * (a + b);
        let tol1 = eps * x.abs() + tol / T::lit(3.0);
        let tol2 = two * tol1;
        if (x - m).abs() <= tol2 - half * (b - a) {
            return Minimum {
                x,
                fx,
                evaluations,
                converged: true,
            };
        }
        let mut golden_step = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = two * (q - r);
            if q > T::zero() {
                p = -p;
            } else {
                q = -q;
            }
            let e_prev = e;
            e = d;
            if p.abs() < (half * q * e_prev).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if x < m { tol1 } else { -tol1 };
                }
                golden_step = false;
            }
        }
        if golden_step {
            e = if x < m { b - x } else { a - x };
            d = golden * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else if d > T::zero() {
            x + tol1
        } else {
            x - tol1
        };
        let fu = f(u);
        evaluations += 1;
        if fu <= fx {
            if u < x {
                b = x;
            } else {
                a = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Minimum {
        x,
        fx,
        evaluations,
        converged: false,
    }
}

/// Finds a root of `f` in `[a, b]` given `f(a)·f(b) ≤ 0` (Brent–Dekker).
pub fn brent_root<T: Real, F: FnMut(T) -> T>(
    mut f: F,
    a: T,
    b: T,
    fa: T,
    fb: T,
    xtol: T,
    max_iter: usize,
) -> Result<T> {
    let (mut a, mut b, mut fa, mut fb) = (a, b, fa, fb);
    if fa == T::zero() {
        return Ok(a);
    }
    if fb == T::zero() {
        return Ok(b);
    }
    if (fa > T::zero()) == (fb > T::zero()) {
        return Err(Error::Domain(format!(
            "root not bracketed: f({a}) = {fa}, f({b}) = {fb}"
        )));
    }
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if (fb > T::zero()) == (fc > T::zero()) {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = two * T::epsilon() * b.abs() + half * xtol;
        let m = half * (c - b);
        if m.abs() <= tol1 || fb == T::zero() {
            return Ok(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = two * m * s;
                q = T::one() - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (two * m * qa * (qa - r) - (b - a) * (r - T::one()));
                q = (qa - T::one()) * (r - T::one()) * (s - T::one());
            }
            if p > T::zero() {
                q = -q;
            } else {
                p = -p;
            }
            if two * p < (three * m * q - (tol1 * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b = if d.abs() > tol1 {
            b + d
        } else if m > T::zero() {
            b + tol1
        } else {
            b - tol1
        };
        fb = f(b);
    }
    Ok(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NelderMeadOptions {
    /// Convergence when the spread of simplex values falls below this.
    pub ftol: f64,
    /// ... and the simplex diameter below this.
    pub xtol: f64,
    pub max_evals: usize,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            ftol: 1e-8,
            xtol: 1e-6,
            max_evals: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexMinimum<T> {
    pub x: Vec<T>,
    pub fx: T,
    pub evaluations: usize,
    pub converged: bool,
}

fn project<T: Real>(x: &mut [T], bounds: &[(T, T)]) {
    for (xi, &(lo, hi)) in x.iter_mut().zip(bounds) {
        *xi = xi.max(lo).min(hi);
    }
}

/// Box-constrained Nelder–Mead; trial points are projected onto the box.
pub fn nelder_mead<T: Real, F: FnMut(&[T]) -> T>(
    mut f: F,
    x0: &[T],
    step: &[T],
    bounds: &[(T, T)],
    opts: NelderMeadOptions,
) -> SimplexMinimum<T> {
    let n = x0.len();
    assert_eq!(step.len(), n, "step dimension");
    assert_eq!(bounds.len(), n, "bounds dimension");
    let mut evals = 0usize;
    let mut eval = |x: &[T], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            T::infinity()
        }
    };

    let mut start = x0.to_vec();
    project(&mut start, bounds);
    let mut simplex: Vec<Vec<T>> = vec![start.clone()];
    for i in 0..n {
        let mut v = start.clone();
        v[i] += step[i];
        project(&mut v, bounds);
        if v[i] == start[i] {
            v[i] -= step[i];
            project(&mut v, bounds);
        }
        simplex.push(v);
    }
    let mut values: Vec<T> = simplex.iter().map(|v| eval(v, &mut evals)).collect();

    let (alpha, gamma, rho, sigma) = (T::one(), T::lit(2.0), T::lit(0.5), T::lit(0.5));
    let nt = T::from_usize(n).unwrap();
    let mut converged = false;

    while evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let spread = values[n] - values[0];
        let diameter = simplex[1..]
            .iter()
            .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (*a - *b).abs()))
            .fold(T::zero(), |m, d| m.max(d));
        if spread.abs() <= T::lit(opts.ftol) && diameter <= T::lit(opts.xtol) {
            converged = true;
            break;
        }

        let mut centroid = vec![T::zero(); n];
        for v in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += *x / nt;
            }
        }
        let along = |coef: T| -> Vec<T> {
            let mut p: Vec<T> = centroid
                .iter()
                .zip(&simplex[n])
                .map(|(c, w)| *c + coef * (*c - *w))
                .collect();
            project(&mut p, bounds);
            p
        };

        let xr = along(alpha);
        let fr = eval(&xr, &mut evals);
        if fr < values[0] {
            let xe = along(gamma);
            let fe = eval(&xe, &mut evals);
            if fe < fr {
                simplex[n] = xe;
                values[n] = fe;
            } else {
                simplex[n] = xr;
                values[n] = fr;
            }
            continue;
        }
        if fr < values[n - 1] {
            simplex[n] = xr;
            values[n] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[n] {
            let xc = along(rho * alpha);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        } else {
            let xc = along(-rho);
            let fc = eval(&xc, &mut evals);
            (xc, fc)
        };
        if fc < values[n].min(fr) {
            simplex[n] = xc;
            values[n] = fc;
            continue;
        }
        let best = simplex[0].clone();
        for i in 1..=n {
            for (x, b) in simplex[i].iter_mut().zip(&best) {
                *x = *b + sigma * (*x - *b);
            }
            values[i] = eval(&simplex[i], &mut evals);
        }
    }
    let (ibest, _) = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    SimplexMinimum {
        x: simplex[ibest].clone(),
        fx: values[ibest],
        evaluations: evals,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brent_finds_interior_minimum() {
        let m = brent_minimize(|x: f64| (x - 1.234).powi(2) + 3.0, -5.0, 5.0, 1e-9, 200);
        assert!(m.converged);
        assert!((m.x - 1.234).abs() < 1e-7);
        assert!((m.fx - 3.0).abs() < 1e-12);
    }

    #[test]
    fn brent_approaches_boundary_minimum() {
        let m = brent_minimize(|x: f64| x, 2.0, 7.0, 1e-6, 200);
        assert!(m.x - 2.0 < 1e-5);
    }

    #[test]
    fn brent_in_single_precision() {
        let m = brent_minimize(|x: f32| (x - 0.5).powi(2), 0.0, 3.0, 1e-4, 100);
        assert!((m.x - 0.5).abs() < 1e-3);
    }

    #[test]
    fn root_of_cubic() {
        let f = |x: f64| x * x * x - 2.0 * x - 5.0;
        let r = brent_root(f, 2.0, 3.0, f(2.0), f(3.0), 1e-12, 100).unwrap();
        assert!((r - 2.094_551_481_542_326_5).abs() < 1e-10);
    }

    #[test]
    fn root_requires_bracket() {
        let f = |x: f64| x * x + 1.0;
        assert!(brent_root(f, -1.0, 1.0, 2.0, 2.0, 1e-9, 50).is_err());
    }

    #[test]
    fn nelder_mead_rosenbrock() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = nelder_mead(
            rosen,
            &[-1.2, 1.0],
            &[0.5, 0.5],
            &[(-5.0, 5.0), (-5.0, 5.0)],
            NelderMeadOptions {
                ftol: 1e-14,
                xtol: 1e-8,
                max_evals: 5000,
            },
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn nelder_mead_respects_bounds() {
        let r = nelder_mead(
            |x: &[f64]| (x[0] + 3.0).powi(2),
            &[0.0],
            &[0.5],
            &[(-1.0, 1.0)],
            NelderMeadOptions::default(),
        );
        assert!((r.x[0] + 1.0).abs() < 1e-6);
    }
}
