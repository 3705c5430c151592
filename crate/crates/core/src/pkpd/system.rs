//! Right-hand sides of the PK and PK/PD ODE systems.

use crate::ode::OdeSystem;
use crate::pkpd::model::OccasionParams;
use crate::scalar::Real;

pub const N_PK: usize = 3;
pub const N_STATES: usize = 9;

/// State vector layout. Amounts in µmol, cell counts in 10⁹ cells/L.
pub mod idx {
    pub const CENT: usize = 0;
    pub const PER1: usize = 1;
    pub const PER2: usize = 2;
    pub const STEM: usize = 3;
    pub const PROL: usize = 4;
    pub const TRANSIT1: usize = 5;
    pub const TRANSIT2: usize = 6;
    pub const TRANSIT3: usize = 7;
    pub const CIRC: usize = 8;
}

pub const STATE_NAMES: [&str; N_STATES] = [
    "cent", "per1", "per2", "stem", "prol", "transit1", "transit2", "transit3", "circ",
];

/// Drug-free equilibrium: no drug, all PD compartments at `circ0`.
pub fn baseline_state<T: Real>(circ0: T) -> [T; N_STATES] {
    let z = T::zero();
    [z, z, z, circ0, circ0, circ0, circ0, circ0, circ0]
}

#[derive(Debug, Clone, Copy)]
struct PkRates<T> {
    inv_v1: T,
    km_el: T,
    vm_el: T,
    km_tr: T,
    vm_tr: T,
    k21: T,
    k13: T,
    k31: T,
    rate: T,
}

impl<T: Real> PkRates<T> {
    fn new(p: &OccasionParams, infusion_rate: f64) -> Self {
        Self {
            inv_v1: T::lit(1.0 / p.v1),
            km_el: T::lit(p.km_el),
            vm_el: T::lit(p.vm_el),
            km_tr: T::lit(p.km_tr),
            vm_tr: T::lit(p.vm_tr),
            k21: T::lit(p.k21),
            k13: T::lit(p.q / p.v1),
            k31: T::lit(p.q / p.v3),
            rate: T::lit(infusion_rate),
        }
    }

    /// Returns (dCent, dPer1, dPer2, C1).
    #[inline]
    fn eval(&self, cent: T, per1: T, per2: T) -> (T, T, T, T) {
        let c1 = cent * self.inv_v1;
        let elim = self.vm_el * c1 / (self.km_el + c1);
        let transfer = self.vm_tr * c1 / (self.km_tr + c1);
        let d_cent = self.rate - elim + self.k21 * per1 - transfer + self.k31 * per2
            - self.k13 * cent;
        let d_per1 = transfer - self.k21 * per1;
        let d_per2 = self.k13 * cent - self.k31 * per2;
        (d_cent, d_per1, d_per2, c1)
    }

    /// Writes the 3×3 PK block of the Jacobian; returns C1.
    #[inline]
    fn jacobian_block<const N: usize>(&self, cent: T, jac: &mut [[T; N]; N]) -> T {
        let c1 = cent * self.inv_v1;
        let de = self.km_el + c1;
        let dt = self.km_tr + c1;
        let d_elim = self.vm_el * self.km_el / (de * de) * self.inv_v1;
        let d_transfer = self.vm_tr * self.km_tr / (dt * dt) * self.inv_v1;
        jac[0][0] = -d_elim - d_transfer - self.k13;
        jac[0][1] = self.k21;
        jac[0][2] = self.k31;
        jac[1][0] = d_transfer;
        jac[1][1] = -self.k21;
        jac[2][0] = self.k13;
        jac[2][2] = -self.k31;
        c1
    }
}

/// Paclitaxel three-compartment PK model with Michaelis–Menten elimination and
/// distribution, alone.
#[derive(Debug, Clone, Copy)]
pub struct PkSystem<T> {
    pk: PkRates<T>,
}

impl<T: Real> PkSystem<T> {
    pub fn new(p: &OccasionParams, infusion_rate: f64) -> Self {
        Self {
            pk: PkRates::new(p, infusion_rate),
        }
    }
}

impl<T: Real> OdeSystem<T, N_PK> for PkSystem<T> {
    #[inline]
    fn rhs(&self, _t: T, y: &[T; N_PK], dydt: &mut [T; N_PK]) {
        let (a, b, c, _) = self.pk.eval(y[0], y[1], y[2]);
        dydt[0] = a;
        dydt[1] = b;
        dydt[2] = c;
    }

    fn jacobian(&self, _t: T, y: &[T; N_PK], jac: &mut [[T; N_PK]; N_PK]) {
        *jac = [[T::zero(); N_PK]; N_PK];
        self.pk.jacobian_block(y[0], jac);
    }

    fn is_autonomous(&self) -> bool {
        true
    }
}

/// PK model coupled to the bone-marrow-exhaustion model (stem cell,
/// proliferating, three transit and circulating compartments with feedback).
#[derive(Debug, Clone, Copy)]
pub struct PkPdSystem<T> {
    pk: PkRates<T>,
    ktr: T,
    kprol: T,
    kstem: T,
    slope: T,
    gamma: T,
    circ0: T,
    circ_floor: T,
}

impl<T: Real> PkPdSystem<T> {
    /// `infusion_rate` in µmol/h, constant over the integration segment.
    pub fn new(p: &OccasionParams, infusion_rate: f64) -> Self {
        let ktr = 4.0 / p.mtt;
        Self {
            pk: PkRates::new(p, infusion_rate),
            ktr: T::lit(ktr),
            kprol: T::lit(p.ftr * ktr),
            kstem: T::lit((1.0 - p.ftr) * ktr),
            slope: T::lit(p.slope),
            gamma: T::lit(p.gamma_fb),
            circ0: T::lit(p.circ0),
            circ_floor: T::lit(p.circ0 * 1e-12),
        }
    }
}

impl<T: Real> OdeSystem<T, N_STATES> for PkPdSystem<T> {
    #[inline]
    fn rhs(&self, _t: T, y: &[T; N_STATES], dydt: &mut [T; N_STATES]) {
        let (d_cent, d_per1, d_per2, c1) = self.pk.eval(y[idx::CENT], y[idx::PER1], y[idx::PER2]);
        dydt[idx::CENT] = d_cent;
        dydt[idx::PER1] = d_per1;
        dydt[idx::PER2] = d_per2;

        let e_drug = self.slope * c1;
        let circ = y[idx::CIRC].max(self.circ_floor);
        let feedback = (self.circ0 / circ).powf(self.gamma);
        let growth = (T::one() - e_drug) * feedback;
        let stem = y[idx::STEM];
        let prol = y[idx::PROL];
        dydt[idx::STEM] = self.kstem * stem * growth - self.kstem * stem;
        dydt[idx::PROL] = self.kprol * prol * growth + self.kstem * stem - self.ktr * prol;
        dydt[idx::TRANSIT1] = self.ktr * (prol - y[idx::TRANSIT1]);
        dydt[idx::TRANSIT2] = self.ktr * (y[idx::TRANSIT1] - y[idx::TRANSIT2]);
        dydt[idx::TRANSIT3] = self.ktr * (y[idx::TRANSIT2] - y[idx::TRANSIT3]);
        dydt[idx::CIRC] = self.ktr * (y[idx::TRANSIT3] - y[idx::CIRC]);
    }

    fn jacobian(&self, _t: T, y: &[T; N_STATES], jac: &mut [[T; N_STATES]; N_STATES]) {
        *jac = [[T::zero(); N_STATES]; N_STATES];
        let c1 = self.pk.jacobian_block(y[idx::CENT], jac);
        let raw = y[idx::CIRC];
        let circ = raw.max(self.circ_floor);
        let feedback = (self.circ0 / circ).powf(self.gamma);
        let kill = T::one() - self.slope * c1;
        let growth = kill * feedback;
        let d_growth_d_cent = -self.slope * self.pk.inv_v1 * feedback;
        let d_growth_d_circ = if raw > self.circ_floor {
            -self.gamma * growth / circ
        } else {
            T::zero()
        };
        let stem = y[idx::STEM];
        let prol = y[idx::PROL];

        jac[idx::STEM][idx::STEM] = self.kstem * (growth - T::one());
        jac[idx::STEM][idx::CENT] = self.kstem * stem * d_growth_d_cent;
        jac[idx::STEM][idx::CIRC] = self.kstem * stem * d_growth_d_circ;

        jac[idx::PROL][idx::PROL] = self.kprol * growth - self.ktr;
        jac[idx::PROL][idx::STEM] = self.kstem;
        jac[idx::PROL][idx::CENT] = self.kprol * prol * d_growth_d_cent;
        jac[idx::PROL][idx::CIRC] = self.kprol * prol * d_growth_d_circ;

        let chain = [idx::PROL, idx::TRANSIT1, idx::TRANSIT2, idx::TRANSIT3, idx::CIRC];
        for w in chain.windows(2) {
            jac[w[1]][w[0]] = self.ktr;
            jac[w[1]][w[1]] = -self.ktr;
        }
    }

    fn is_autonomous(&self) -> bool {
        true
    }
}
