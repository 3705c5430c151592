//! Forward simulation of dosing regimens, trajectory summaries and export.

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{OdeSystem, Solver, SolverOptions};
use crate::pkpd::model::{IndividualParameters, OccasionParams, PopulationModel};
use crate::pkpd::system::{baseline_state, idx, PkPdSystem, PkSystem, N_PK, N_STATES, STATE_NAMES};
use crate::scalar::Real;

pub const DEFAULT_CYCLE_LENGTH: f64 = 504.0;
pub const DEFAULT_CYCLES: usize = 6;
pub const DEFAULT_INFUSION_HOURS: f64 = 3.0;
/// Sampling step inside cycles used for nadir detection, h.
pub const DEFAULT_GRID_STEP: f64 = 1.0;

/// PD states below this value (after integration) indicate a numerical problem.
const NEGATIVE_FLOOR: f64 = -1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dose {
    /// Infusion start, h.
    pub time: f64,
    /// Absolute amount, mg.
    pub amount_mg: f64,
    /// Infusion duration, h.
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseRegimen {
    pub doses: Vec<Dose>,
    pub cycle_length: f64,
    pub cycles: usize,
}

impl DoseRegimen {
    pub fn empty(cycle_length: f64, cycles: usize) -> Self {
        Self {
            doses: Vec::new(),
            cycle_length,
            cycles,
        }
    }

    /// One infusion at the start of every cycle.
    pub fn per_cycle(amounts_mg: &[f64], infusion_hours: f64, cycle_length: f64) -> Self {
        Self {
            doses: amounts_mg
                .iter()
                .enumerate()
                .map(|(c, &amount_mg)| Dose {
                    time: c as f64 * cycle_length,
                    amount_mg,
                    duration: infusion_hours,
                })
                .collect(),
            cycle_length,
            cycles: amounts_mg.len().max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cycle_length > 0.0) {
            return Err(Error::InvalidInput("cycle length must be positive".into()));
        }
        for w in self.doses.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::InvalidInput(format!(
                    "dose times must be strictly increasing ({} then {})",
                    w[0].time, w[1].time
                )));
            }
        }
        for d in &self.doses {
            if !(d.amount_mg >= 0.0 && d.amount_mg.is_finite()) {
                return Err(Error::InvalidInput(format!("dose amount {} < 0", d.amount_mg)));
            }
            if !(d.duration > 0.0) {
                return Err(Error::InvalidInput("infusion duration must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn end_time(&self) -> f64 {
        self.cycles as f64 * self.cycle_length
    }
}

/// Constant-rate input active on `[start, stop)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Infusion {
    pub start: f64,
    pub stop: f64,
    /// µmol/h
    pub rate: f64,
}

impl Infusion {
    pub fn from_dose(model: &PopulationModel, dose: &Dose) -> Self {
        Self {
            start: dose.time,
            stop: dose.time + dose.duration,
            rate: model.mg_to_umol(dose.amount_mg) / dose.duration,
        }
    }
}

/// Simulated states on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<[T; N_STATES]>,
    /// Central volume in effect at each grid time (occasion-dependent).
    pub v1: Vec<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn circ(&self) -> Vec<T> {
        self.states.iter().map(|s| s[idx::CIRC]).collect()
    }

    /// Plasma concentration C1 = Cent/V1 (µM).
    pub fn c1(&self) -> Vec<T> {
        self.states
            .iter()
            .zip(&self.v1)
            .map(|(s, v)| s[idx::CENT] / *v)
            .collect()
    }

    /// Minimum circulating neutrophils over `[start, end]`.
    pub fn nadir(&self, start: T, end: T) -> Result<T> {
        nadir_in(&self.times, &self.circ(), start, end)
    }

    /// Time (h) inside `[start, end]` with C1 above `threshold` (µM).
    pub fn exposure_time_above(&self, threshold: T, start: T, end: T) -> T {
        time_above(&self.times, &self.c1(), threshold, start, end)
    }

    /// Value of an observable at a grid time.
    pub fn value_at(&self, t: T, kind: Observable) -> Result<T> {
        let i = self
            .times
            .iter()
            .position(|&x| (x - t).abs() <= T::lit(1e-9) * (T::one() + t.abs()))
            .ok_or_else(|| Error::InvalidInput(format!("time {t} is not on the grid")))?;
        Ok(match kind {
            Observable::Neutrophils => self.states[i][idx::CIRC],
            Observable::Drug => self.states[i][idx::CENT] / self.v1[i],
        })
    }

    /// CSV with header `time,cent,...,circ,c1`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,{},c1", STATE_NAMES.join(","))?;
        for ((t, s), v1) in self.times.iter().zip(&self.states).zip(&self.v1) {
            write!(w, "{t}")?;
            for x in s {
                write!(w, ",{x}")?;
            }
            writeln!(w, ",{}", s[idx::CENT] / *v1)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Observable {
    Neutrophils,
    Drug,
}

/// Minimum of `values` over the grid points inside `[start, end]`, refined by
/// the vertex of the parabola through the discrete minimum and its neighbours.
pub fn nadir_in<T: Real>(times: &[T], values: &[T], start: T, end: T) -> Result<T> {
    let lo = times.partition_point(|&t| t < start);
    let hi = times.partition_point(|&t| t <= end);
    if lo >= hi {
        return Err(Error::EmptyWindow {
            start: start.as_f64(),
            end: end.as_f64(),
        });
    }
    let mut best = lo;
    for i in lo..hi {
        if values[i] < values[best] {
            best = i;
        }
    }
    let mut result = values[best];
    if best > lo && best + 1 < hi {
        let (t0, t1, t2) = (times[best - 1], times[best], times[best + 1]);
        let (y0, y1, y2) = (values[best - 1], values[best], values[best + 1]);
        // Newton divided differences.
        let d01 = (y1 - y0) / (t1 - t0);
        let d12 = (y2 - y1) / (t2 - t1);
        let a = (d12 - d01) / (t2 - t0);
        if a > T::zero() {
            let b = d01 - a * (t0 + t1);
            let tv = -b / (T::lit(2.0) * a);
            if tv >= t0 && tv <= t2 {
                let pv = y0 + (tv - t0) * (d01 + a * (tv - t1));
                result = result.min(pv);
            }
        }
    }
    Ok(result.max(T::zero()))
}

/// Streaming version of [`nadir_in`]: keeps the smallest sample and its
/// neighbours instead of the whole curve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningNadir {
    min: Option<[f64; 2]>,
    left: Option<[f64; 2]>,
    right: Option<[f64; 2]>,
    last: Option<[f64; 2]>,
}

impl RunningNadir {
    pub fn push(&mut self, t: f64, v: f64) {
        let p = [t, v];
        match self.min {
            Some(m) if v >= m[1] => {
                if self.right.is_none() && self.last == Some(m) {
                    self.right = Some(p);
                }
            }
            _ => {
                self.left = self.last;
                self.min = Some(p);
                self.right = None;
            }
        }
        self.last = Some(p);
    }

    pub fn is_empty(&self) -> bool {
        self.min.is_none()
    }

    pub fn value(&self) -> Option<f64> {
        let m = self.min?;
        match (self.left, self.right) {
            (Some(l), Some(r)) => {
                let t = [l[0], m[0], r[0]];
                let y = [l[1], m[1], r[1]];
                nadir_in(&t, &y, t[0], t[2]).ok()
            }
            _ => Some(m[1].max(0.0)),
        }
    }
}

/// Total time within `[start, end]` where the sampled curve exceeds
/// `threshold`, with crossings located by log-linear interpolation inside the
/// bracketing grid cell.
pub fn time_above<T: Real>(times: &[T], values: &[T], threshold: T, start: T, end: T) -> T {
    let lo = times.partition_point(|&t| t < start);
    let hi = times.partition_point(|&t| t <= end);
    let mut total = T::zero();
    if hi <= lo + 1 {
        return total;
    }
    for i in lo..hi - 1 {
        let (ta, tb) = (times[i], times[i + 1]);
        let (ca, cb) = (values[i], values[i + 1]);
        let dt = tb - ta;
        let above_a = ca > threshold;
        let above_b = cb > threshold;
        match (above_a, above_b) {
            (true, true) => total += dt,
            (false, false) => {}
            _ => {
                let frac = crossing_fraction(ca, cb, threshold);
                if above_a {
                    total += frac * dt;
                } else {
                    total += (T::one() - frac) * dt;
                }
            }
        }
    }
    total
}

fn crossing_fraction<T: Real>(ca: T, cb: T, thr: T) -> T {
    let frac = if ca > T::zero() && cb > T::zero() {
        (thr.ln() - ca.ln()) / (cb.ln() - ca.ln())
    } else {
        (thr - ca) / (cb - ca)
    };
    frac.max(T::zero()).min(T::one())
}

/// End state and samples of a single simulated window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRun<T> {
    pub end: [T; N_STATES],
    pub samples: Vec<[T; N_STATES]>,
}

/// Integrates the PK/PD system with restarts at every input discontinuity.
#[derive(Debug, Clone, Copy)]
pub struct Simulator<T> {
    solver: Solver<T>,
    pub options: SolverOptions,
}

impl<T: Real> Default for Simulator<T> {
    fn default() -> Self {
        Self::new(SolverOptions::default())
    }
}

impl<T: Real> Simulator<T> {
    pub fn new(options: SolverOptions) -> Self {
        Self {
            solver: Solver::new(options),
            options,
        }
    }

    /// Integrates over `[t0, t1]` with fixed occasion parameters, restarting at
    /// infusion boundaries and at every time in `restarts`. Samples are taken
    /// at the ascending `sample_times` lying inside the window.
    pub fn run_window(
        &self,
        occ: &OccasionParams,
        y0: [T; N_STATES],
        t0: f64,
        t1: f64,
        infusions: &[Infusion],
        restarts: &[f64],
        sample_times: &[T],
    ) -> Result<WindowRun<T>> {
        let mut samples = vec![[T::zero(); N_STATES]; sample_times.len()];
        let end = self.integrate_segments(
            |rate| PkPdSystem::<T>::new(occ, rate),
            y0,
            t0,
            t1,
            infusions,
            restarts,
            sample_times,
            |i, y| samples[i] = *y,
        )?;
        let end = clamp_pd(end, t1);
        for (s, t) in samples.iter_mut().zip(sample_times) {
            *s = clamp_pd(*s, t.as_f64());
        }
        Ok(WindowRun { end, samples })
    }

    /// PK-only integration, used when only exposure is of interest.
    pub fn run_pk_window(
        &self,
        occ: &OccasionParams,
        y0: [T; N_PK],
        t0: f64,
        t1: f64,
        infusions: &[Infusion],
        sample_times: &[T],
    ) -> Result<([T; N_PK], Vec<[T; N_PK]>)> {
        let mut samples = vec![[T::zero(); N_PK]; sample_times.len()];
        let end = self.integrate_segments(
            |rate| PkSystem::<T>::new(occ, rate),
            y0,
            t0,
            t1,
            infusions,
            &[],
            sample_times,
            |i, y| samples[i] = *y,
        )?;
        Ok((end, samples))
    }

    #[allow(clippy::too_many_arguments)]
    fn integrate_segments<S, F, const N: usize>(
        &self,
        make_system: impl Fn(f64) -> S,
        y0: [T; N],
        t0: f64,
        t1: f64,
        infusions: &[Infusion],
        restarts: &[f64],
        sample_times: &[T],
        mut on_sample: F,
    ) -> Result<[T; N]>
    where
        S: OdeSystem<T, N>,
        F: FnMut(usize, &[T; N]),
    {
        let mut cuts = vec![t0, t1];
        for inf in infusions {
            cuts.push(inf.start);
            cuts.push(inf.stop);
        }
        cuts.extend_from_slice(restarts);
        cuts.retain(|&c| c >= t0 && c <= t1);
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

        let mut y = y0;
        let mut h_hint = None;
        let mut first_sample = sample_times.partition_point(|&s| s < T::lit(t0));
        let n_seg = cuts.len().saturating_sub(1);
        for (k, w) in cuts.windows(2).enumerate() {
            let (a, b) = (w[0], w[1]);
            let mid = 0.5 * (a + b);
            let rate: f64 = infusions
                .iter()
                .filter(|inf| inf.start <= mid && mid < inf.stop)
                .map(|inf| inf.rate)
                .sum();
            let sys = make_system(rate);
            let last_seg = k + 1 == n_seg;
            let bt = T::lit(b);
            let stop = if last_seg {
                sample_times.partition_point(|&s| s <= bt)
            } else {
                sample_times.partition_point(|&s| s < bt)
            };
            let seg_samples = &sample_times[first_sample..stop.max(first_sample)];
            let offset = first_sample;
            let seg = self.solver.integrate(
                &sys,
                T::lit(a),
                y,
                bt,
                seg_samples,
                h_hint,
                |i, _t, ys| on_sample(offset + i, ys),
            )?;
            y = seg.y;
            h_hint = Some(seg.last_h);
            first_sample = stop.max(first_sample);
        }
        Ok(y)
    }

    /// Simulates a full regimen for one patient on `grid` (ascending, starting
    /// at or after 0). Occasion parameters switch at every cycle start.
    pub fn simulate(
        &self,
        model: &PopulationModel,
        params: &IndividualParameters,
        regimen: &DoseRegimen,
        grid: &[f64],
    ) -> Result<Trajectory<T>> {
        self.simulate_with_restarts(model, params, regimen, grid, &[])
    }

    pub fn simulate_with_restarts(
        &self,
        model: &PopulationModel,
        params: &IndividualParameters,
        regimen: &DoseRegimen,
        grid: &[f64],
        restarts: &[f64],
    ) -> Result<Trajectory<T>> {
        regimen.validate()?;
        if grid.is_empty() {
            return Ok(Trajectory {
                times: vec![],
                states: vec![],
                v1: vec![],
            });
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) || grid[0] < 0.0 {
            return Err(Error::InvalidInput("grid must be ascending and non-negative".into()));
        }
        let t_end = grid[grid.len() - 1].max(regimen.end_time());
        let len = regimen.cycle_length;
        let n_occ = ((t_end / len).ceil() as usize).max(1);
        let infusions: Vec<Infusion> = regimen
            .doses
            .iter()
            .map(|d| Infusion::from_dose(model, d))
            .collect();

        let grid_t: Vec<T> = grid.iter().map(|&g| T::lit(g)).collect();
        let mut states = Vec::with_capacity(grid.len());
        let mut v1 = Vec::with_capacity(grid.len());
        let mut y = baseline_state(T::lit(params.circ0));
        for c in 0..n_occ {
            let a = c as f64 * len;
            let b = if c + 1 == n_occ { t_end } else { (c + 1) as f64 * len };
            let occ = params.occasion(c);
            let lo = grid.partition_point(|&g| g < a);
            let hi = if c + 1 == n_occ {
                grid.len()
            } else {
                grid.partition_point(|&g| g < b)
            };
            let run = self.run_window(&occ, y, a, b, &infusions, restarts, &grid_t[lo..hi])?;
            states.extend(run.samples);
            v1.extend(std::iter::repeat(T::lit(occ.v1)).take(hi - lo));
            y = run.end;
        }
        Ok(Trajectory {
            times: grid_t,
            states,
            v1,
        })
    }
}

/// One treatment cycle: a single infusion at `start`, integrated to `start + length`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleSpec {
    pub start: f64,
    pub length: f64,
    pub dose_mg: f64,
    pub infusion_hours: f64,
    /// Spacing of the internal sampling grid used for the nadir, h.
    pub grid_step: f64,
}

impl CycleSpec {
    pub fn new(start: f64, dose_mg: f64) -> Self {
        Self {
            start,
            length: DEFAULT_CYCLE_LENGTH,
            dose_mg,
            infusion_hours: DEFAULT_INFUSION_HOURS,
            grid_step: DEFAULT_GRID_STEP,
        }
    }

    pub fn end(&self) -> f64 {
        self.start + self.length
    }
}

/// Result of [`Simulator::run_cycle`].
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRun<T> {
    pub end: [T; N_STATES],
    pub nadir: T,
    /// States at the requested probe times, in request order.
    pub probes: Vec<[T; N_STATES]>,
    /// Circ on the cycle grid (empty unless requested).
    pub circ: Vec<T>,
}

impl<T: Real> Simulator<T> {
    /// Simulates one cycle from `y0`, restarting at every probe time.
    pub fn run_cycle(
        &self,
        model: &PopulationModel,
        occ: &OccasionParams,
        y0: [T; N_STATES],
        spec: &CycleSpec,
        probes: &[f64],
        keep_circ: bool,
    ) -> Result<CycleRun<T>> {
        if !(spec.length > 0.0 && spec.grid_step > 0.0) {
            return Err(Error::InvalidInput("cycle length and grid step must be positive".into()));
        }
        if !(spec.dose_mg >= 0.0) {
            return Err(Error::InvalidInput(format!("dose amount {} < 0", spec.dose_mg)));
        }
        let (a, b) = (spec.start, spec.end());
        if let Some(p) = probes.iter().find(|&&p| p < a || p > b) {
            return Err(Error::InvalidInput(format!("probe time {p} outside cycle [{a}, {b}]")));
        }
        let grid = uniform_grid(a, b, spec.grid_step);
        let n_grid = grid.len();
        let mut times: Vec<f64> = grid.iter().chain(probes).copied().collect();
        times.sort_by(|x, y| x.partial_cmp(y).unwrap());
        times.dedup();
        let times_t: Vec<T> = times.iter().map(|&x| T::lit(x)).collect();
        let infusions: Vec<Infusion> = if spec.dose_mg > 0.0 {
            vec![Infusion::from_dose(
                model,
                &Dose {
                    time: a,
                    amount_mg: spec.dose_mg,
                    duration: spec.infusion_hours,
                },
            )]
        } else {
            Vec::new()
        };
        let run = self.run_window(occ, y0, a, b, &infusions, probes, &times_t)?;
        let lookup = |t: f64| times.partition_point(|&x| x < t);
        let probe_states = probes.iter().map(|&p| run.samples[lookup(p)]).collect();
        let mut circ_grid = Vec::with_capacity(n_grid);
        for &g in &grid {
            circ_grid.push(run.samples[lookup(g)][idx::CIRC]);
        }
        let grid_t: Vec<T> = grid.iter().map(|&g| T::lit(g)).collect();
        let nadir = nadir_in(&grid_t, &circ_grid, T::lit(a), T::lit(b))?;
        Ok(CycleRun {
            end: run.end,
            nadir,
            probes: probe_states,
            circ: if keep_circ { circ_grid } else { Vec::new() },
        })
    }
}

fn clamp_pd<T: Real>(mut y: [T; N_STATES], t: f64) -> [T; N_STATES] {
    for v in y.iter_mut() {
        if *v < T::zero() {
            if v.as_f64() < NEGATIVE_FLOOR {
                warn!("negative state {v} clamped at t = {t}");
            }
            *v = T::zero();
        }
    }
    y
}

/// Uniform grid `start, start+step, …, end` (end included).
pub fn uniform_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step).round() as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pkpd::model::PatientCovariates;

    fn typical() -> (PopulationModel, IndividualParameters) {
        let m = PopulationModel::default();
        let p = IndividualParameters::typical(&m, &PatientCovariates::reference(), 6).unwrap();
        (m, p)
    }

    #[test]
    fn nadir_of_constant_is_the_constant() {
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let v = vec![5.0; 10];
        assert_eq!(nadir_in(&t, &v, 0.0, 9.0).unwrap(), 5.0);
    }

    #[test]
    fn nadir_respects_window() {
        let t: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let v = vec![3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.5, 3.2, 3.6, 4.0];
        assert!((nadir_in(&t, &v, 0.0, 9.0).unwrap() - 1.0).abs() < 1.0);
        assert!(nadir_in(&t, &v, 0.0, 9.0).unwrap() <= 1.0);
        let local = nadir_in(&t, &v, 5.0, 9.0).unwrap();
        assert!(local > 3.0 && local <= 3.2);
    }

    #[test]
    fn nadir_parabola_vertex_is_exact_for_quadratics() {
        let t: Vec<f64> = (0..20).map(|i| i as f64 * 0.7).collect();
        let v: Vec<f64> = t.iter().map(|x| (x - 5.13).powi(2) + 0.25).collect();
        assert!((nadir_in(&t, &v, 0.0, 20.0).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_window_is_an_error() {
        let t = vec![0.0, 1.0];
        let v = vec![1.0, 1.0];
        assert!(matches!(
            nadir_in(&t, &v, 2.0, 3.0),
            Err(Error::EmptyWindow { .. })
        ));
    }

    #[test]
    fn time_above_linear_and_log_crossings() {
        let t: Vec<f64> = vec![0.0, 1.0, 2.0, 3.0];
        let c = vec![0.0, 1.0, 1.0, 0.25];
        // rising edge crosses 0.5 at t = 0.5 (linear, one end zero);
        // falling edge log-linear crossing at t = 2.5.
        let above = time_above(&t, &c, 0.5, 0.0, 3.0);
        assert!((above - 2.0).abs() < 1e-12, "{above}");
    }

    #[test]
    fn zero_dose_keeps_equilibrium_for_six_cycles() {
        let (m, p) = typical();
        let sim = Simulator::<f64>::default();
        let regimen = DoseRegimen::empty(DEFAULT_CYCLE_LENGTH, 6);
        let grid = uniform_grid(0.0, 6.0 * DEFAULT_CYCLE_LENGTH, 12.0);
        let traj = sim.simulate(&m, &p, &regimen, &grid).unwrap();
        for s in &traj.states {
            for k in 0..3 {
                assert_eq!(s[k], 0.0);
            }
            for k in 3..9 {
                assert!(((s[k] - p.circ0) / p.circ0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dose_suppresses_neutrophils_and_exposure_is_positive() {
        let (m, p) = typical();
        let sim = Simulator::<f64>::default();
        let regimen = DoseRegimen::per_cycle(&[360.0], 3.0, DEFAULT_CYCLE_LENGTH);
        let grid = uniform_grid(0.0, DEFAULT_CYCLE_LENGTH, 1.0);
        let traj = sim.simulate(&m, &p, &regimen, &grid).unwrap();
        let nadir = traj.nadir(0.0, DEFAULT_CYCLE_LENGTH).unwrap();
        assert!(nadir < p.circ0);
        let exp = traj.exposure_time_above(0.05, 0.0, DEFAULT_CYCLE_LENGTH);
        assert!(exp > 5.0 && exp < 100.0, "{exp}");
    }

    #[test]
    fn cycle_runs_chain_like_a_full_regimen() {
        let (m, p) = typical();
        let sim = Simulator::<f64>::default();
        let doses = [360.0, 300.0];
        let regimen = DoseRegimen::per_cycle(&doses, 3.0, DEFAULT_CYCLE_LENGTH);
        let grid = uniform_grid(0.0, 2.0 * DEFAULT_CYCLE_LENGTH, 1.0);
        let traj = sim.simulate(&m, &p, &regimen, &grid).unwrap();
        let mut y = baseline_state(p.circ0);
        for (c, &d) in doses.iter().enumerate() {
            let spec = CycleSpec::new(c as f64 * DEFAULT_CYCLE_LENGTH, d);
            let probe = spec.start + 360.0;
            let run = sim.run_cycle(&m, &p.occasion(c), y, &spec, &[probe], true).unwrap();
            let full = traj.nadir(spec.start, spec.end()).unwrap();
            assert!(((run.nadir - full) / full).abs() < 1e-7);
            let at = traj.value_at(probe, Observable::Neutrophils).unwrap();
            assert!(((run.probes[0][idx::CIRC] - at) / at).abs() < 1e-7);
            assert_eq!(run.circ.len(), 505);
            y = run.end;
        }
    }

    #[test]
    fn regimen_validation() {
        let mut r = DoseRegimen::per_cycle(&[100.0, 100.0], 3.0, 504.0);
        assert!(r.validate().is_ok());
        r.doses[1].time = 0.0;
        assert!(r.validate().is_err());
        let r = DoseRegimen::per_cycle(&[-1.0], 3.0, 504.0);
        assert!(r.validate().is_err());
    }

    #[test]
    fn running_nadir_matches_batch() {
        let times: Vec<f64> = (0..200).map(|i| i as f64 * 0.7).collect();
        let values: Vec<f64> = times.iter().map(|t| 2.0 + (t / 9.0).sin() + 0.01 * t).collect();
        let mut r = RunningNadir::default();
        for (t, v) in times.iter().zip(&values) {
            r.push(*t, *v);
        }
        let batch = nadir_in(&times, &values, 0.0, times[199]).unwrap();
        assert_eq!(r.value().unwrap(), batch);
        let mut edge = RunningNadir::default();
        assert!(edge.value().is_none());
        edge.push(0.0, 3.0);
        edge.push(1.0, 2.0);
        assert_eq!(edge.value(), Some(2.0));
    }
}
