//! Adaptive one-step integrators with continuous output.
//!
//! Integrators are restarted by the caller at every discontinuity of the
//! right-hand side (infusion start/stop, occasion switches); between restarts
//! intermediate sample times are served from dense output so the step size is
//! never forced down to the sampling grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

mod dopri5;
mod rodas;

pub use dopri5::Dopri5;
pub use rodas::Rodas4;

/// A first-order system `dy/dt = f(t, y)` with a fixed state dimension.
pub trait OdeSystem<T: Real, const N: usize> {
    fn rhs(&self, t: T, y: &[T; N], dydt: &mut [T; N]);

    /// Whether `f` ignores `t`; lets implicit methods skip `∂f/∂t`.
    fn is_autonomous(&self) -> bool {
        false
    }

    /// Jacobian `jac[i][j] = ∂f_i/∂y_j`. The default uses forward differences.
    fn jacobian(&self, t: T, y: &[T; N], jac: &mut [[T; N]; N]) {
        let mut f0 = [T::zero(); N];
        self.rhs(t, y, &mut f0);
        let mut yp = *y;
        let mut fp = [T::zero(); N];
        let sqrt_eps = T::epsilon().sqrt();
        for j in 0..N {
            let delta = sqrt_eps * y[j].abs().max(T::lit(1e-5));
            yp[j] = y[j] + delta;
            self.rhs(t, &yp, &mut fp);
            for i in 0..N {
                jac[i][j] = (fp[i] - f0[i]) / delta;
            }
            yp[j] = y[j];
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Linearly implicit Rosenbrock 4(3), L-stable.
    #[default]
    Rodas4,
    /// Explicit Dormand–Prince 5(4).
    Dopri5,
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("maximum number of steps exceeded at t = {t}")]
    TooManySteps { t: f64 },
    #[error("non-finite state encountered at t = {t}")]
    NonFinite { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Upper bound on the step size (time units of the system).
    pub h_max: f64,
    pub max_steps: usize,
    #[serde(default)]
    pub method: Method,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-10,
            h_max: 24.0,
            max_steps: 200_000,
            method: Method::default(),
        }
    }
}

impl SolverOptions {
    /// Looser tolerances for the many short simulations made while planning
    /// and estimating. Nadirs agree with the default preset to about 1e-4 relative.
    pub fn planning() -> Self {
        Self {
            rtol: 1e-5,
            atol: 1e-8,
            ..Self::default()
        }
    }

    /// Same options with both tolerances scaled by `factor`.
    pub fn scaled(self, factor: f64) -> Self {
        Self {
            rtol: self.rtol * factor,
            atol: self.atol * factor,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl std::ops::AddAssign for StepStats {
    fn add_assign(&mut self, rhs: Self) {
        self.accepted += rhs.accepted;
        self.rejected += rhs.rejected;
        self.evaluations += rhs.evaluations;
    }
}

/// Result of one integration segment.
#[derive(Debug, Clone, Copy)]
pub struct Segment<T, const N: usize> {
    pub y: [T; N],
    /// Last accepted step size, useful as a hint for the next segment.
    pub last_h: T,
    pub stats: StepStats,
}


/// Integrator selected by [`SolverOptions::method`].
#[derive(Debug, Clone, Copy)]
pub enum Solver<T> {
    Rodas4(Rodas4<T>),
    Dopri5(Dopri5<T>),
}

impl<T: Real> Solver<T> {
    pub fn new(opts: SolverOptions) -> Self {
        match opts.method {
            Method::Rodas4 => Self::Rodas4(Rodas4::new(opts)),
            Method::Dopri5 => Self::Dopri5(Dopri5::new(opts)),
        }
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
        on_sample: F,
    ) -> Result<Segment<T, N>, OdeError>
    where
        S: OdeSystem<T, N>,
        F: FnMut(usize, T, &[T; N]),
    {
        match self {
            Self::Rodas4(s) => s.integrate(sys, t0, y0, t_end, samples, h_hint, on_sample),
            Self::Dopri5(s) => s.integrate(sys, t0, y0, t_end, samples, h_hint, on_sample),
        }
    }
}

/// RMS norm of `err` scaled by `atol + rtol·max(|y0|, |y1|)`.
pub(crate) fn error_norm<T: Real, const N: usize>(
    err: &[T; N],
    y0: &[T; N],
    y1: &[T; N],
    rtol: T,
    atol: T,
) -> T {
    let mut sum = T::zero();
    for i in 0..N {
        let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
        let r = err[i] / sc;
        sum += r * r;
    }
    (sum / T::from_usize(N).unwrap()).sqrt()
}
