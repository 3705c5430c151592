//! Explicit Dormand–Prince 5(4) with PI step control and 4th-order dense output.

use super::{OdeError, OdeSystem, Segment, SolverOptions, StepStats};
use crate::scalar::Real;

// Dormand–Prince tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Embedded Runge–Kutta 5(4) solver of Dormand and Prince with PI step control.
#[derive(Debug, Clone, Copy)]
pub struct Dopri5<T> {
    rtol: T,
    atol: T,
    h_max: T,
    max_steps: usize,
}

impl<T: Real> Dopri5<T> {
    pub fn new(opts: SolverOptions) -> Self {
        Self {
            rtol: T::lit(opts.rtol),
            atol: T::lit(opts.atol),
            h_max: T::lit(opts.h_max),
            max_steps: opts.max_steps,
        }
    }

    /// Integrates from `t0` to `t_end`, calling `on_sample(i, t, y)` for every
    /// `samples[i]` (ascending, inside `[t0, t_end]`).
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
        let mut k1 = [zero; N];
        sys.rhs(t, &y, &mut k1);
        stats.evaluations += 1;

        let mut h = match h_hint {
            Some(h) if h > zero => h,
            _ => self.initial_step(sys, t, &y, &k1, &mut stats),
        };
        h = h.min(self.h_max).min(span);

        let safe = T::lit(0.9);
        let fac_min = T::lit(0.2);
        let fac_max = T::lit(10.0);
        let beta = T::lit(0.04);
        let expo = T::lit(0.2) - beta * T::lit(0.75);
        let mut err_old = T::lit(1e-4);
        let mut last_rejected = false;
        let h_floor = T::epsilon() * T::lit(16.0) * (t0.abs() + span);

        let mut k2 = [zero; N];
        let mut k3 = [zero; N];
        let mut k4 = [zero; N];
        let mut k5 = [zero; N];
        let mut k6 = [zero; N];
        let mut k7 = [zero; N];
        let mut tmp = [zero; N];
        let mut y_new = [zero; N];

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

            for i in 0..N {
                tmp[i] = y[i] + h * T::lit(A21) * k1[i];
            }
            sys.rhs(t + T::lit(C2) * h, &tmp, &mut k2);
            for i in 0..N {
                tmp[i] = y[i] + h * (T::lit(A31) * k1[i] + T::lit(A32) * k2[i]);
            }
            sys.rhs(t + T::lit(C3) * h, &tmp, &mut k3);
            for i in 0..N {
                tmp[i] = y[i]
                    + h * (T::lit(A41) * k1[i] + T::lit(A42) * k2[i] + T::lit(A43) * k3[i]);
            }
            sys.rhs(t + T::lit(C4) * h, &tmp, &mut k4);
            for i in 0..N {
                tmp[i] = y[i]
                    + h * (T::lit(A51) * k1[i]
                        + T::lit(A52) * k2[i]
                        + T::lit(A53) * k3[i]
                        + T::lit(A54) * k4[i]);
            }
            sys.rhs(t + T::lit(C5) * h, &tmp, &mut k5);
            for i in 0..N {
                tmp[i] = y[i]
                    + h * (T::lit(A61) * k1[i]
                        + T::lit(A62) * k2[i]
                        + T::lit(A63) * k3[i]
                        + T::lit(A64) * k4[i]
                        + T::lit(A65) * k5[i]);
            }
            let t_new = if last { t_end } else { t + h };
            sys.rhs(t_new, &tmp, &mut k6);
            for i in 0..N {
                y_new[i] = y[i]
                    + h * (T::lit(A71) * k1[i]
                        + T::lit(A73) * k3[i]
                        + T::lit(A74) * k4[i]
                        + T::lit(A75) * k5[i]
                        + T::lit(A76) * k6[i]);
            }
            sys.rhs(t_new, &y_new, &mut k7);
            stats.evaluations += 6;

            let mut err_sum = zero;
            for i in 0..N {
                let e = h
                    * (T::lit(E1) * k1[i]
                        + T::lit(E3) * k3[i]
                        + T::lit(E4) * k4[i]
                        + T::lit(E5) * k5[i]
                        + T::lit(E6) * k6[i]
                        + T::lit(E7) * k7[i]);
                let sc = self.atol + self.rtol * y[i].abs().max(y_new[i].abs());
                let r = e / sc;
                err_sum += r * r;
            }
            let err = (err_sum / T::from_usize(N).unwrap()).sqrt();
            if !err.is_finite() {
                // Treat as a hard rejection; shrink aggressively.
                stats.rejected += 1;
                h = h * fac_min;
                last_rejected = true;
                continue;
            }

            if err <= one {
                stats.accepted += 1;
                if next_sample < samples.len() && samples[next_sample] <= t_new {
                    // Continuous extension coefficients.
                    let mut r2 = [zero; N];
                    let mut r3 = [zero; N];
                    let mut r4 = [zero; N];
                    let mut r5 = [zero; N];
                    for i in 0..N {
                        let dy = y_new[i] - y[i];
                        let bspl = h * k1[i] - dy;
                        r2[i] = dy;
                        r3[i] = bspl;
                        r4[i] = dy - h * k7[i] - bspl;
                        r5[i] = h
                            * (T::lit(D1) * k1[i]
                                + T::lit(D3) * k3[i]
                                + T::lit(D4) * k4[i]
                                + T::lit(D5) * k5[i]
                                + T::lit(D6) * k6[i]
                                + T::lit(D7) * k7[i]);
                    }
                    while next_sample < samples.len() && samples[next_sample] <= t_new {
                        let ts = samples[next_sample];
                        let theta = (ts - t) / h;
                        let theta1 = one - theta;
                        let mut ys = [zero; N];
                        for i in 0..N {
                            ys[i] = y[i]
                                + theta
                                    * (r2[i]
                                        + theta1
                                            * (r3[i] + theta * (r4[i] + theta1 * r5[i])));
                        }
                        on_sample(next_sample, ts, &ys);
                        next_sample += 1;
                    }
                }

                if y_new.iter().any(|v| !v.is_finite()) {
                    return Err(OdeError::NonFinite { t: t_new.as_f64() });
                }
                let accepted_h = h;
                t = t_new;
                y = y_new;
                k1 = k7;
                if last {
                    return Ok(Segment {
                        y,
                        last_h: accepted_h,
                        stats,
                    });
                }
                let err_c = err.max(T::lit(1e-10));
                let mut fac = safe * err_c.powf(-expo) * err_old.powf(beta);
                fac = fac.max(fac_min).min(fac_max);
                if last_rejected {
                    fac = fac.min(one);
                }
                err_old = err_c;
                h = (h * fac).min(self.h_max);
                last_rejected = false;
            } else {
                stats.rejected += 1;
                let fac = (safe * err.powf(-expo)).max(fac_min);
                h = h * fac;
                last_rejected = true;
            }
        }
    }

    fn initial_step<S, const N: usize>(
        &self,
        sys: &S,
        t: T,
        y: &[T; N],
        f0: &[T; N],
        stats: &mut StepStats,
    ) -> T
    where
        S: OdeSystem<T, N>,
    {
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
        let mut h0 = if d0 < T::lit(1e-5) || d1 < T::lit(1e-5) {
            T::lit(1e-6)
        } else {
            T::lit(0.01) * d0 / d1
        };
        h0 = h0.min(self.h_max);
        let mut y1 = [T::zero(); N];
        for i in 0..N {
            y1[i] = y[i] + h0 * f0[i];
        }
        let mut f1 = [T::zero(); N];
        sys.rhs(t + h0, &y1, &mut f1);
        stats.evaluations += 1;
        let mut d2 = T::zero();
        for i in 0..N {
            let sc = self.atol + self.rtol * y[i].abs();
            d2 += ((f1[i] - f0[i]) / sc).powi(2);
        }
        d2 = (d2 / n).sqrt() / h0;
        let h1 = if d1.max(d2) <= T::lit(1e-15) {
            (h0 * T::lit(1e-3)).max(T::lit(1e-6))
        } else {
            (T::lit(0.01) / d1.max(d2)).powf(T::lit(0.2))
        };
        (T::lit(100.0) * h0).min(h1).min(self.h_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Decay(f64);
    impl OdeSystem<f64, 1> for Decay {
        fn rhs(&self, _t: f64, y: &[f64; 1], dydt: &mut [f64; 1]) {
            dydt[0] = -self.0 * y[0];
        }
    }

    struct Oscillator;
    impl<T: Real> OdeSystem<T, 2> for Oscillator {
        fn rhs(&self, _t: T, y: &[T; 2], dydt: &mut [T; 2]) {
            dydt[0] = y[1];
            dydt[1] = -y[0];
        }
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let solver = Dopri5::<f64>::new(SolverOptions::default());
        let samples: Vec<f64> = (0..=50).map(|i| i as f64 * 0.2).collect();
        let mut worst = 0.0f64;
        let seg = solver
            .integrate(&Decay(0.7), 0.0, [2.0], 10.0, &samples, None, |_, t, y| {
                let exact = 2.0 * (-0.7 * t).exp();
                worst = worst.max((y[0] - exact).abs() / exact);
            })
            .unwrap();
        assert!(worst < 1e-7, "dense output error {worst}");
        assert!((seg.y[0] - 2.0 * (-7.0f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn oscillator_in_single_precision() {
        let opts = SolverOptions {
            rtol: 1e-5,
            atol: 1e-6,
            ..SolverOptions::default()
        };
        let solver = Dopri5::<f32>::new(opts);
        let seg = solver
            .integrate(&Oscillator, 0.0f32, [1.0, 0.0], 6.0, &[], None, |_, _, _| {})
            .unwrap();
        assert!((seg.y[0] - 6.0f32.cos()).abs() < 1e-3);
        assert!((seg.y[1] + 6.0f32.sin()).abs() < 1e-3);
    }

    #[test]
    fn samples_at_segment_bounds_are_reported() {
        let solver = Dopri5::<f64>::new(SolverOptions::default());
        let mut seen = Vec::new();
        solver
            .integrate(&Decay(1.0), 1.0, [1.0], 2.0, &[1.0, 1.5, 2.0], None, |i, t, _| {
                seen.push((i, t))
            })
            .unwrap();
        assert_eq!(seen, vec![(0, 1.0), (1, 1.5), (2, 2.0)]);
    }

    #[test]
    fn step_budget_is_enforced() {
        let opts = SolverOptions {
            max_steps: 3,
            ..SolverOptions::default()
        };
        let solver = Dopri5::<f64>::new(opts);
        let err = solver
            .integrate(&Oscillator, 0.0, [1.0, 0.0], 100.0, &[], None, |_, _, _| {})
            .unwrap_err();
        assert!(matches!(err, OdeError::TooManySteps { .. }));
    }
}
