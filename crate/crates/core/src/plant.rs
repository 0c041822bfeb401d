//! pH neutralization tank: three-state ODE, implicit titration output and the
//! normalization blocks between physical and network units.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Alkaline-flow saturation `U_φ` in mL/s.
pub const U_PHI_MIN: f64 = 12.5;
pub const U_PHI_MAX: f64 = 17.0;
/// Admissible pH band.
pub const Y_PHI_MIN: f64 = 6.0;
pub const Y_PHI_MAX: f64 = 9.0;
/// Sampling period in seconds.
pub const TS: f64 = 10.0;
/// Nominal buffer flow (the disturbance) and alkaline flow, mL/s.
pub const Q2_NOMINAL: f64 = 0.55;
pub const Q3_NOMINAL: f64 = 15.6;

const RK4_SUBSTEPS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhParams {
    pub z: f64,
    pub c_v4: f64,
    pub n_exp: f64,
    pub pk1: f64,
    pub pk2: f64,
    pub w_a1: f64,
    pub w_b1: f64,
    pub w_a2: f64,
    pub w_b2: f64,
    pub w_a3: f64,
    pub w_b3: f64,
    pub q1: f64,
    pub a1: f64,
}

impl Default for PhParams {
    fn default() -> Self {
        PhParams {
            z: 11.5,
            c_v4: 4.59,
            n_exp: 0.607,
            pk1: 6.35,
            pk2: 10.25,
            w_a1: 3.0e-3,
            w_b1: 0.0,
            w_a2: -0.03,
            w_b2: 0.03,
            // Negative: the alkaline stream carries negative charge-related content.
            // Only this sign reproduces the tabulated outlet W_a4.
            w_a3: -3.05e-3,
            w_b3: 5.0e-5,
            q1: 16.6,
            a1: 207.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub w_a4: f64,
    pub w_b4: f64,
    pub h1: f64,
}

impl PlantState {
    /// The operating point as printed in the parameter table (rounded values).
    pub fn table_nominal() -> Self {
        PlantState {
            w_a4: -4.32e-4,
            w_b4: 5.28e-4,
            h1: 14.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w_a4, self.w_b4, self.h1]
    }
}

impl PhParams {
    fn rhs(&self, x: &[f64; 3], u: f64, d: f64) -> Result<[f64; 3]> {
        let h = x[2];
        if !(h > 0.0) {
            return Err(Error::Physical(format!("tank level h1 = {h} must stay positive")));
        }
        let k = 1.0 / (self.a1 * h);
        let outflow = self.c_v4 * (h + self.z).powf(self.n_exp);
        Ok([
            k * (self.q1 * (self.w_a1 - x[0]) + u * (self.w_a3 - x[0]) + d * (self.w_a2 - x[0])),
            k * (self.q1 * (self.w_b1 - x[1]) + u * (self.w_b3 - x[1]) + d * (self.w_b2 - x[1])),
            (self.q1 + u + d - outflow) / self.a1,
        ])
    }

    /// Exact steady state for constant flows `u` (alkaline) and `d` (buffer).
    pub fn steady_state(&self, u: f64, d: f64) -> Result<PlantState> {
        let total = self.q1 + u + d;
        if !(total > 0.0) {
            return Err(Error::Argument("total inflow must be positive".into()));
        }
        let h1 = (total / self.c_v4).powf(1.0 / self.n_exp) - self.z;
        if !(h1 > 0.0) {
            return Err(Error::Physical(format!("steady level {h1} is not positive")));
        }
        Ok(PlantState {
            w_a4: (self.q1 * self.w_a1 + u * self.w_a3 + d * self.w_a2) / total,
            w_b4: (self.q1 * self.w_b1 + u * self.w_b3 + d * self.w_b2) / total,
            h1,
        })
    }

    /// Steady state at the nominal alkaline and buffer flows.
    pub fn nominal_state(&self) -> PlantState {
        self.steady_state(Q3_NOMINAL, Q2_NOMINAL)
            .expect("default parameters have a physical steady state")
    }

    /// Charge balance `c(x, pH)`; its root in pH is the measured output.
    pub fn charge_balance(&self, x: &PlantState, ph: f64) -> f64 {
        let num = 1.0 + 2.0 * 10f64.powf(ph - self.pk2);
        let den = 1.0 + 10f64.powf(self.pk1 - ph) + 10f64.powf(ph - self.pk2);
        x.w_a4 + 10f64.powf(ph - 14.0) - 10f64.powf(-ph) + x.w_b4 * num / den
    }

    fn charge_balance_dph(&self, x: &PlantState, ph: f64) -> f64 {
        let ln10 = std::f64::consts::LN_10;
        let a = 10f64.powf(ph - self.pk2);
        let b = 10f64.powf(self.pk1 - ph);
        let num = 1.0 + 2.0 * a;
        let den = 1.0 + b + a;
        let dnum = 2.0 * a * ln10;
        let dden = (a - b) * ln10;
        ln10 * (10f64.powf(ph - 14.0) + 10f64.powf(-ph)) + x.w_b4 * (dnum * den - num * dden) / (den * den)
    }
}

/// Advance the plant by `dt` seconds with classical RK4 over fixed substeps.
pub fn plant_step(p: &PhParams, x: PlantState, u_phi: f64, d_phi: f64, dt: f64) -> Result<PlantState> {
    plant_step_with(p, x, u_phi, d_phi, dt, RK4_SUBSTEPS)
}

/// [`plant_step`] with an explicit substep count.
pub fn plant_step_with(
    p: &PhParams,
    x: PlantState,
    u_phi: f64,
    d_phi: f64,
    dt: f64,
    substeps: usize,
) -> Result<PlantState> {
    if substeps == 0 {
        return Err(Error::Argument("substeps must be positive".into()));
    }
    let h = dt / substeps as f64;
    let mut s = x.as_array();
    let axpy = |a: &[f64; 3], k: &[f64; 3], t: f64| [a[0] + t * k[0], a[1] + t * k[1], a[2] + t * k[2]];
    for _ in 0..substeps {
        let k1 = p.rhs(&s, u_phi, d_phi)?;
        let k2 = p.rhs(&axpy(&s, &k1, h / 2.0), u_phi, d_phi)?;
        let k3 = p.rhs(&axpy(&s, &k2, h / 2.0), u_phi, d_phi)?;
        let k4 = p.rhs(&axpy(&s, &k3, h), u_phi, d_phi)?;
        for i in 0..3 {
            s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !(s[2] > 0.0) {
            return Err(Error::Physical(format!("tank level h1 = {} must stay positive", s[2])));
        }
    }
    Ok(PlantState {
        w_a4: s[0],
        w_b4: s[1],
        h1: s[2],
    })
}

/// Solve the titration equation for pH: bisection on [0, 14] then Newton polish.
pub fn measure_ph(p: &PhParams, x: &PlantState) -> Result<f64> {
    let (mut lo, mut hi) = (0.0, 14.0);
    let (clo, chi) = (p.charge_balance(x, lo), p.charge_balance(x, hi));
    if !(clo * chi < 0.0) {
        return Err(Error::Unphysical(format!(
            "no pH root in [0, 14] (c(0) = {clo:.3e}, c(14) = {chi:.3e})"
        )));
    }
    // c is increasing in pH for physical states; keep the orientation general anyway.
    let rising = chi > 0.0;
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        let cm = p.charge_balance(x, mid);
        if (cm > 0.0) == rising {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let mut ph = 0.5 * (lo + hi);
    for _ in 0..2 {
        let d = p.charge_balance_dph(x, ph);
        if d == 0.0 {
            break;
        }
        let next = ph - p.charge_balance(x, ph) / d;
        if (lo - 1e-9..=hi + 1e-9).contains(&next) {
            ph = next;
        }
    }
    Ok(ph)
}

pub fn saturate_input(u_phi: f64) -> f64 {
    u_phi.clamp(U_PHI_MIN, U_PHI_MAX)
}

/// Affine map between physical units and the network's [−1, 1] range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub u_lo: f64,
    pub u_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Input,
    Output,
}

impl Normalizer {
    pub fn new(u_lo: f64, u_hi: f64, y_lo: f64, y_hi: f64) -> Result<Self> {
        if !(u_hi > u_lo) || !(y_hi > y_lo) {
            return Err(Error::Argument("normalizer needs hi > lo on both channels".into()));
        }
        Ok(Normalizer { u_lo, u_hi, y_lo, y_hi })
    }

    fn range(&self, ch: Channel) -> (f64, f64) {
        match ch {
            Channel::Input => (self.u_lo, self.u_hi),
            Channel::Output => (self.y_lo, self.y_hi),
        }
    }

    pub fn normalize(&self, v: f64, ch: Channel) -> f64 {
        let (lo, hi) = self.range(ch);
        2.0 * (v - lo) / (hi - lo) - 1.0
    }

    pub fn denormalize(&self, v: f64, ch: Channel) -> f64 {
        let (lo, hi) = self.range(ch);
        lo + (v + 1.0) * 0.5 * (hi - lo)
    }

    /// Scale factor from normalized to physical output differences.
    pub fn y_scale(&self) -> f64 {
        0.5 * (self.y_hi - self.y_lo)
    }

    pub fn u_scale(&self) -> f64 {
        0.5 * (self.u_hi - self.u_lo)
    }
}
