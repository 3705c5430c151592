//! Rodas4: a 6-stage, L-stable Rosenbrock method of order 4 with an embedded
//! order-3 error estimate. Dense output is cubic Hermite between accepted steps.

use super::{error_norm, OdeError, OdeSystem, Segment, SolverOptions, StepStats};
use crate::scalar::Real;

const GAMMA: f64 = 0.25;
const C2: f64 = 0.386;
const C3: f64 = 0.21;
const C4: f64 = 0.63;
const D1: f64 = 0.25;
const D2: f64 = -0.1043;
const D3: f64 = 0.1035;
const D4: f64 = -0.362_000_000_000_002_3e-1;
const A21: f64 = 0.1544e1;
const A31: f64 = 0.946_678_528_081_582_6;
const A32: f64 = 0.255_701_169_898_328_4;
const A41: f64 = 0.331_482_518_706_852_1e1;
const A42: f64 = 0.289_612_401_597_220_1e1;
const A43: f64 = 0.998_641_913_997_781_7;
const A51: f64 = 0.122_122_450_922_664_1e1;
const A52: f64 = 0.601_913_448_128_862_9e1;
const A53: f64 = 0.125_370_833_293_208_7e2;
const A54: f64 = -0.687_886_036_105_895;
const C21: f64 = -0.566_88e1;
const C31: f64 = -0.243_009_335_683_387_5e1;
const C32: f64 = -0.206_359_915_709_191_5;
const C41: f64 = -0.107_352_905_815_137_5;
const C42: f64 = -0.959_456_225_102_335_5e1;
const C43: f64 = -0.204_702_861_480_961_6e2;
const C51: f64 = 0.749_644_331_396_764_7e1;
const C52: f64 = -0.102_468_043_146_435_2e2;
const C53: f64 = -0.339_999_035_281_990_5e2;
const C54: f64 = 0.117_089_089_320_616e2;
const C61: f64 = 0.808_324_679_592_152_2e1;
const C62: f64 = -0.798_113_298_806_489_3e1;
const C63: f64 = -0.315_215_943_287_437_1e2;
const C64: f64 = 0.163_193_054_312_313_6e2;
const C65: f64 = -0.605_881_823_883_405_4e1;

#[derive(Debug, Clone, Copy)]
pub struct Rodas4<T> {
    rtol: T,
    atol: T,
    h_max: T,
    max_steps: usize,
}

/// In-place LU factorization with partial pivoting. Returns `None` when singular.
fn lu_factor<T: Real, const N: usize>(a: &mut [[T; N]; N]) -> Option<[usize; N]> {
    let mut piv = [0usize; N];
    for k in 0..N {
        let mut p = k;
        let mut best = a[k][k].abs();
        for i in k + 1..N {
            if a[i][k].abs() > best {
                best = a[i][k].abs();
                p = i;
            }
        }
        if best == T::zero() || !best.is_finite() {
            return None;
        }
        piv[k] = p;
        if p != k {
            a.swap(p, k);
        }
        let inv = T::one() / a[k][k];
        for i in k + 1..N {
            let f = a[i][k] * inv;
            a[i][k] = f;
            if f != T::zero() {
                for j in k + 1..N {
                    let akj = a[k][j];
                    a[i][j] -= f * akj;
                }
            }
        }
    }
    Some(piv)
}

fn lu_solve<T: Real, const N: usize>(lu: &[[T; N]; N], piv: &[usize; N], b: &mut [T; N]) {
    for k in 0..N {
        b.swap(k, piv[k]);
    }
    for k in 0..N {
        let bk = b[k];
        for i in k + 1..N {
            b[i] -= lu[i][k] * bk;
        }
    }
    for k in (0..N).rev() {
        let mut s = b[k];
        for j in k + 1..N {
            s -= lu[k][j] * b[j];
        }
        b[k] = s / lu[k][k];
    }
}

struct Stepped<T, const N: usize> {
    y: [T; N],
    err: [T; N],
}

impl<T: Real> Rodas4<T> {
    pub fn new(opts: SolverOptions) -> Self {
        Self {
            rtol: T::lit(opts.rtol),
            atol: T::lit(opts.atol),
            h_max: T::lit(opts.h_max),
            max_steps: opts.max_steps,
        }
    }

    /// One step of size `h`; `None` if the iteration matrix is singular.
    #[allow(clippy::too_many_arguments)]
    fn step<S, const N: usize>(
        &self,
        sys: &S,
        t: T,
        y: &[T; N],
        f0: &[T; N],
        jac: &[[T; N]; N],
        ft: Option<&[T; N]>,
        h: T,
        stats: &mut StepStats,
    ) -> Option<Stepped<T, N>>
    where
        S: OdeSystem<T, N>,
    {
        let zero = T::zero();
        let fac = T::one() / (T::lit(GAMMA) * h);
        let mut w = [[zero; N]; N];
        for i in 0..N {
            for j in 0..N {
                w[i][j] = -jac[i][j];
            }
            w[i][i] += fac;
        }
        let piv = lu_factor(&mut w)?;
        let inv_h = T::one() / h;
        let time_term = |d: f64, i: usize| match ft {
            Some(ft) => h * T::lit(d) * ft[i],
            None => zero,
        };

        let mut k1 = [zero; N];
        for i in 0..N {
            k1[i] = f0[i] + time_term(D1, i);
        }
        lu_solve(&w, &piv, &mut k1);

        let mut ys = [zero; N];
        let mut f = [zero; N];
        for i in 0..N {
            ys[i] = y[i] + T::lit(A21) * k1[i];
        }
        sys.rhs(t + T::lit(C2) * h, &ys, &mut f);
        let mut k2 = [zero; N];
        for i in 0..N {
            k2[i] = f[i] + T::lit(C21) * k1[i] * inv_h + time_term(D2, i);
        }
        lu_solve(&w, &piv, &mut k2);

        for i in 0..N {
            ys[i] = y[i] + T::lit(A31) * k1[i] + T::lit(A32) * k2[i];
        }
        sys.rhs(t + T::lit(C3) * h, &ys, &mut f);
        let mut k3 = [zero; N];
        for i in 0..N {
            k3[i] = f[i]
                + (T::lit(C31) * k1[i] + T::lit(C32) * k2[i]) * inv_h
                + time_term(D3, i);
        }
        lu_solve(&w, &piv, &mut k3);

        for i in 0..N {
            ys[i] = y[i] + T::lit(A41) * k1[i] + T::lit(A42) * k2[i] + T::lit(A43) * k3[i];
        }
        sys.rhs(t + T::lit(C4) * h, &ys, &mut f);
        let mut k4 = [zero; N];
        for i in 0..N {
            k4[i] = f[i]
                + (T::lit(C41) * k1[i] + T::lit(C42) * k2[i] + T::lit(C43) * k3[i]) * inv_h
                + time_term(D4, i);
        }
        lu_solve(&w, &piv, &mut k4);

        for i in 0..N {
            ys[i] = y[i]
                + T::lit(A51) * k1[i]
                + T::lit(A52) * k2[i]
                + T::lit(A53) * k3[i]
                + T::lit(A54) * k4[i];
        }
        let t1 = t + h;
        sys.rhs(t1, &ys, &mut f);
        let mut k5 = [zero; N];
        for i in 0..N {
            k5[i] = f[i]
                + (T::lit(C51) * k1[i]
                    + T::lit(C52) * k2[i]
                    + T::lit(C53) * k3[i]
                    + T::lit(C54) * k4[i])
                    * inv_h;
        }
        lu_solve(&w, &piv, &mut k5);

        for i in 0..N {
            ys[i] += k5[i];
        }
        sys.rhs(t1, &ys, &mut f);
        let mut k6 = [zero; N];
        for i in 0..N {
            k6[i] = f[i]
                + (T::lit(C61) * k1[i]
                    + T::lit(C62) * k2[i]
                    + T::lit(C63) * k3[i]
                    + T::lit(C64) * k4[i]
                    + T::lit(C65) * k5[i])
                    * inv_h;
        }
        lu_solve(&w, &piv, &mut k6);
        stats.evaluations += 5;

        for i in 0..N {
            ys[i] += k6[i];
        }
        Some(Stepped { y: ys, err: k6 })
    }

    fn time_derivative<S, const N: usize>(
        &self,
        sys: &S,
        t: T,
        y: &[T; N],
        f0: &[T; N],
        stats: &mut StepStats,
    ) -> Option<[T; N]>
    where
        S: OdeSystem<T, N>,
    {
        if sys.is_autonomous() {
            return None;
        }
        let delta = T::epsilon().sqrt() * t.abs().max(T::one());
        let mut f1 = [T::zero(); N];
        sys.rhs(t + delta, y, &mut f1);
        stats.evaluations += 1;
        let mut ft = [T::zero(); N];
        for i in 0..N {
            ft[i] = (f1[i] - f0[i]) / delta;
        }
        Some(ft)
    }

    /// Integrates from `t0` to `t_end`, calling `on_sample(i, t, y)` for every
    /// `samples[i]` (ascending, inside `[t0, t_end]`).
    #[allow(clippy::too_many_arguments)]
    pub fn integrate<S, F, const N: usize>(
        &self,
        sys: &S,
        t0: T,
        y0: [T; N],
        t_end: T,
        samples: &[T],
        h_hint: Option<T>,
        mut on_sample: F,
    ) -> Result<Segment<T, N>, OdeError>
    where
        S: OdeSystem<T, N>,
        F: FnMut(usize, T, &[T; N]),
    {
        let mut stats = StepStats::default();
        let mut next_sample = 0usize;
        while next_sample < samples.len() && samples[next_sample] <= t0 {
            on_sample(next_sample, samples[next_sample], &y0);
            next_sample += 1;
        }
        if t_end <= t0 {
            return Ok(Segment {
                y: y0,
                last_h: h_hint.unwrap_or_else(T::zero),
                stats,
            });
        }

        let zero = T::zero();
        let one = T::one();
        let span = t_end - t0;
        let mut t = t0;
        let mut y = y0;
        let mut f0 = [zero; N];
        sys.rhs(t, &y, &mut f0);
        stats.evaluations += 1;

        let mut h = match h_hint {
            Some(h) if h > zero => h,
            _ => self.initial_step(&y, &f0),
        };
        h = h.min(self.h_max).min(span);

        let safe = T::lit(0.9);
        let fac_min = T::lit(0.2);
        let fac_max = T::lit(6.0);
        let expo = T::lit(0.25);
        let h_floor = T::epsilon() * T::lit(16.0) * (t0.abs() + span);
        let mut last_rejected = false;
        let mut jac = [[zero; N]; N];
        let mut jac_fresh = false;
        let mut ft = None;
        let mut f1 = [zero; N];

        loop {
            if stats.accepted + stats.rejected >= self.max_steps {
                return Err(OdeError::TooManySteps { t: t.as_f64() });
            }
            let remaining = t_end - t;
            let last = h >= remaining * (one - T::lit(1e-12));
            if last {
                h = remaining;
            }
            if h < h_floor {
                return Err(OdeError::StepUnderflow { t: t.as_f64() });
            }
            if !jac_fresh {
                sys.jacobian(t, &y, &mut jac);
                ft = self.time_derivative(sys, t, &y, &f0, &mut stats);
                jac_fresh = true;
            }

            let Some(st) = self.step(sys, t, &y, &f0, &jac, ft.as_ref(), h, &mut stats) else {
                stats.rejected += 1;
                h = h * T::lit(0.5);
                last_rejected = true;
                continue;
            };
            let err = error_norm(&st.err, &y, &st.y, self.rtol, self.atol);
            if !err.is_finite() || st.y.iter().any(|v| !v.is_finite()) {
                stats.rejected += 1;
                h = h * fac_min;
                last_rejected = true;
                continue;
            }

            if err <= one {
                stats.accepted += 1;
                let t_new = if last { t_end } else { t + h };
                sys.rhs(t_new, &st.y, &mut f1);
                stats.evaluations += 1;
                while next_sample < samples.len() && samples[next_sample] <= t_new {
                    let ts = samples[next_sample];
                    let ys = hermite(&y, &f0, &st.y, &f1, h, (ts - t) / h);
                    on_sample(next_sample, ts, &ys);
                    next_sample += 1;
                }
                let accepted_h = h;
                t = t_new;
                y = st.y;
                f0 = f1;
                jac_fresh = false;
                if last {
                    return Ok(Segment {
                        y,
                        last_h: accepted_h,
                        stats,
                    });
                }
                let mut fac = safe * err.max(T::lit(1e-10)).powf(-expo);
                fac = fac.max(fac_min).min(fac_max);
                if last_rejected {
                    fac = fac.min(one);
                }
                h = (h * fac).min(self.h_max);
                last_rejected = false;
            } else {
                stats.rejected += 1;
                h = h * (safe * err.powf(-expo)).max(fac_min);
                last_rejected = true;
            }
        }
    }

    fn initial_step<const N: usize>(&self, y: &[T; N], f0: &[T; N]) -> T {
        let n = T::from_usize(N).unwrap();
        let mut d0 = T::zero();
        let mut d1 = T::zero();
        for i in 0..N {
            let sc = self.atol + self.rtol * y[i].abs();
            d0 += (y[i] / sc).powi(2);
            d1 += (f0[i] / sc).powi(2);
        }
        d0 = (d0 / n).sqrt();
        d1 = (d1 / n).sqrt();
        let h0 = if d0 < T::lit(1e-5) || d1 < T::lit(1e-5) {
            T::lit(1e-6)
        } else {
            T::lit(0.01) * d0 / d1
        };
        h0.min(self.h_max)
    }
}

fn hermite<T: Real, const N: usize>(
    y0: &[T; N],
    f0: &[T; N],
    y1: &[T; N],
    f1: &[T; N],
    h: T,
    s: T,
) -> [T; N] {
    let one = T::one();
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let s2 = s * s;
    let s3 = s2 * s;
    let h00 = two * s3 - three * s2 + one;
    let h10 = s3 - two * s2 + s;
    let h01 = -two * s3 + three * s2;
    let h11 = s3 - s2;
    let mut out = [T::zero(); N];
    for i in 0..N {
        out[i] = h00 * y0[i] + h10 * h * f0[i] + h01 * y1[i] + h11 * h * f1[i];
    }
    out
}
