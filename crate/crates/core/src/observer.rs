//! Augmented model with an integrated output disturbance, the gated observer
//! and its convergence constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{self, gate_bounds, sigmoid, step_injected, GateBounds, LstmState, LstmWeights};
use crate::numerics::{
    eig_extrema_spd, induced_inf_norm, induced_two_norm, norm2, solve_discrete_lyapunov,
    spectral_radius, sub_vec, Mat,
};

/// χ = (x, d).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub x: LstmState,
    pub d: Vec<f64>,
}

impl AugmentedState {
    pub fn new(x: LstmState, d: Vec<f64>) -> Self {
        AugmentedState { x, d }
    }

    pub fn zeros(n: usize, p: usize) -> Self {
        AugmentedState {
            x: LstmState::zeros(n),
            d: vec![0.0; p],
        }
    }
}

/// `y = W_y h + b_y + d`
pub fn augmented_output(w: &LstmWeights, chi: &AugmentedState) -> Result<Vec<f64>> {
    if chi.d.len() != w.p {
        return Err(Error::Dimension("disturbance size mismatch".into()));
    }
    let y = lstm::output(w, &chi.x)?;
    Ok(y.iter().zip(&chi.d).map(|(a, b)| a + b).collect())
}

/// One step of the augmented model: `x⁺ = f(x, u)`, `d⁺ = d + w_k`.
pub fn augmented_step(
    w: &LstmWeights,
    chi: &AugmentedState,
    u: &[f64],
    w_k: &[f64],
    d_max: f64,
) -> Result<AugmentedState> {
    if chi.d.len() != w.p || w_k.len() != w.p {
        return Err(Error::Dimension("disturbance size mismatch".into()));
    }
    let x = lstm::step(w, &chi.x, u)?;
    let d: Vec<f64> = chi.d.iter().zip(w_k).map(|(a, b)| a + b).collect();
    if let Some(j) = d.iter().position(|v| v.abs() > d_max) {
        return Err(Error::Domain(format!(
            "|d[{j}]| = {:.6} exceeds d_max = {d_max}",
            d[j].abs()
        )));
    }
    Ok(AugmentedState { x, d })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverGains {
    pub l_f: Mat,
    pub l_i: Mat,
    pub l_o: Mat,
    pub l_d: Mat,
}

impl ObserverGains {
    /// `L_f = L_i = L_o = 0`, `L_d = l_d I`.
    pub fn suboptimal(n: usize, p: usize, l_d: f64) -> Result<Self> {
        if !(l_d > 0.0 && l_d < 2.0) {
            return Err(Error::Argument(format!("l_d = {l_d} must lie in (0, 2)")));
        }
        Ok(ObserverGains {
            l_f: Mat::zeros(n, p),
            l_i: Mat::zeros(n, p),
            l_o: Mat::zeros(n, p),
            l_d: Mat::identity(p).scale(l_d),
        })
    }

    fn check(&self, w: &LstmWeights) -> Result<()> {
        let np = |m: &Mat| m.rows() == w.n && m.cols() == w.p;
        if !(np(&self.l_f) && np(&self.l_i) && np(&self.l_o))
            || self.l_d.rows() != w.p
            || self.l_d.cols() != w.p
        {
            return Err(Error::Dimension("observer gain shapes".into()));
        }
        Ok(())
    }
}

/// Hatted gate bounds and the error-dynamics matrix `A_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverMatrices {
    pub sigma_hat_f: f64,
    pub sigma_hat_i: f64,
    pub sigma_hat_o: f64,
    pub alpha_hat: f64,
    pub beta_hat: f64,
    pub gamma_hat: f64,
    /// Radius of the invariant set for ĉ.
    pub c_hat_radius: f64,
    pub a_d: Mat,
}

fn hat_sigma(w: &LstmWeights, g: usize, l: &Mat, d_max: f64) -> f64 {
    let lwy = l.matmul(&w.w_y);
    let cat = Mat::hcat(&[
        &w.w(g).scale(w.u_max),
        &w.u(g).sub(&lwy),
        &Mat::column(w.b(g)),
        &lwy,
        &l.scale(2.0 * d_max),
    ])
    .expect("checked shapes");
    sigmoid(induced_inf_norm(&cat))
}

pub fn observer_matrices(
    w: &LstmWeights,
    gains: &ObserverGains,
    d_max: f64,
) -> Result<(GateBounds, ObserverMatrices)> {
    gains.check(w)?;
    let b = gate_bounds(w);
    let n2 = induced_two_norm;
    let sf = hat_sigma(w, 0, &gains.l_f, d_max);
    let si = hat_sigma(w, 1, &gains.l_i, d_max);
    let so = hat_sigma(w, 3, &gains.l_o, d_max);
    let s = b.c_radius;
    let uf = w.u_f.sub(&gains.l_f.matmul(&w.w_y));
    let ui = w.u_i.sub(&gains.l_i.matmul(&w.w_y));
    let uo = w.u_o.sub(&gains.l_o.matmul(&w.w_y));
    let alpha = 0.25 * s * n2(&uf) + b.sigma_i * n2(&w.u_c) + 0.25 * b.sigma_c * n2(&ui);
    let beta = 0.25 * s * n2(&gains.l_f) + 0.25 * b.sigma_c * n2(&gains.l_i);
    let gamma = so * alpha + 0.25 * b.sigma_x * n2(&uo);
    let id = Mat::identity(w.p);
    let a_d = Mat::from_vec(
        3,
        3,
        vec![
            sf,
            alpha,
            beta,
            so * sf,
            gamma,
            so * beta + 0.25 * b.sigma_x * n2(&gains.l_o),
            0.0,
            n2(&gains.l_d.matmul(&w.w_y)),
            n2(&id.sub(&gains.l_d)),
        ],
    )?;
    let c_hat_radius = if sf < 1.0 { si * b.sigma_c / (1.0 - sf) } else { f64::INFINITY };
    Ok((
        b,
        ObserverMatrices {
            sigma_hat_f: sf,
            sigma_hat_i: si,
            sigma_hat_o: so,
            alpha_hat: alpha,
            beta_hat: beta,
            gamma_hat: gamma,
            c_hat_radius,
            a_d,
        },
    ))
}

/// 2-norm bounds on the stacked error `[‖e_c‖, ‖e_h‖, ‖e_d‖]` over the
/// invariant sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBox {
    pub c: f64,
    pub h: f64,
    pub d: f64,
}

impl ErrorBox {
    /// The invariant sets are ∞-norm boxes; their 2-norm diameters pick up √n.
    pub fn from_sets(n: usize, p: usize, c_radius: f64, c_hat_radius: f64, d_max: f64) -> Self {
        let rn = (n as f64).sqrt();
        ErrorBox {
            c: rn * (c_radius + c_hat_radius),
            h: rn * 2.0,
            d: (p as f64).sqrt() * 2.0 * d_max,
        }
    }

    fn as_array(&self) -> [f64; 3] {
        [self.c, self.h, self.d]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    pub p_o: Mat,
    pub rho_o: f64,
    pub c_ol: f64,
    pub c_ou: f64,
    pub c_o: Vec<f64>,
    /// Largest cross term `zᵀ A_dᵀ P_o e₃` over the error box.
    pub cross_max: f64,
}

/// Lyapunov constants of the observer error. `w_y` only shapes `c_o`.
pub fn derive_constants(a_d: &Mat, q_o: &Mat, w_y: &Mat, err: &ErrorBox) -> Result<DerivedConstants> {
    let p_o = solve_discrete_lyapunov(a_d, q_o)?;
    let (pmin, pmax) = eig_extrema_spd(&p_o)?;
    let (qmin, _) = eig_extrema_spd(q_o)?;
    let rho_o = (1.0 - qmin / pmax).max(0.0).sqrt();
    let c_o = (0..w_y.rows())
        .map(|j| (norm2(w_y.row(j)).powi(2) + 1.0).sqrt() / pmin.sqrt())
        .collect();
    // A_d and P_o are entrywise nonnegative, so the cross term is maximal at
    // the far corner of the box; clamp defensively in case of roundoff.
    let v = a_d.transpose().matmul(&p_o);
    let corner = err.as_array();
    let cross_max = (0..3).map(|r| v[(r, 2)].max(0.0) * corner[r]).sum();
    Ok(DerivedConstants {
        p_o,
        rho_o,
        c_ol: pmin.sqrt(),
        c_ou: pmax.sqrt(),
        c_o,
        cross_max,
    })
}

/// Disturbance term of the V_o decay, `√(2 K w_max + w_max² P₃₃)`.
pub fn w_bar_bound(cross_max: f64, p33: f64, w_max: f64) -> f64 {
    (2.0 * cross_max * w_max + w_max * w_max * p33).max(0.0).sqrt()
}

/// Largest `w_max` whose analytic bound does not exceed `w_bar`.
pub fn w_max_for(cross_max: f64, p33: f64, w_bar: f64) -> f64 {
    // rationalized root of `p33 w² + 2K w − w̄² = 0`, stable for large K
    w_bar * w_bar / (cross_max + (cross_max * cross_max + p33 * w_bar * w_bar).sqrt())
}

/// Triangle-inequality form of the same term: `‖A_d z + e₃ w‖_{P_o} ≤ ρ_o V_o + √P₃₃ w`.
/// Never larger than [`w_bar_bound`], and free of the cross term.
pub fn w_bar_triangle(p33: f64, w_max: f64) -> f64 {
    p33.max(0.0).sqrt() * w_max
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GainStrategy {
    Suboptimal {
        l_d: f64,
    },
    /// Random search over all gain entries, started from the suboptimal choice.
    Search {
        l_d: f64,
        seed: u64,
        budget: usize,
        step: f64,
    },
}

impl Default for GainStrategy {
    fn default() -> Self {
        GainStrategy::Suboptimal { l_d: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObserverConfig {
    pub d_max: f64,
    /// `Q_o = q_o I₃`.
    pub q_o: f64,
    /// Configured disturbance term of the V_o decay; `None` uses the analytic bound.
    pub w_bar: Option<f64>,
    /// Bound on `‖w_k‖`; `None` picks the largest value covered by `w_bar`
    /// through the triangle-inequality bound.
    pub w_max: Option<f64>,
    pub strategy: GainStrategy,
}

impl Default for ObserverConfig {
    fn default() -> Self {
        ObserverConfig {
            d_max: 0.1,
            q_o: 1000.0,
            w_bar: Some(0.01),
            w_max: None,
            strategy: GainStrategy::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverSpec {
    pub gains: ObserverGains,
    pub d_max: f64,
    #[serde(flatten)]
    pub matrices: ObserverMatrices,
    pub rho_a_d: f64,
    #[serde(flatten)]
    pub constants: DerivedConstants,
    pub error_box: ErrorBox,
    /// `L` of the one-step gain inequality.
    pub l_mat: Mat,
    pub l_max: f64,
    pub w_max: f64,
    /// The value used by the tightening and the ê_o recursion.
    pub w_bar: f64,
    /// Cross-term bound at `w_max` maximized over the error box, reported for comparison.
    pub w_bar_analytic: f64,
    /// `√P₃₃ w_max`.
    pub w_bar_triangle: f64,
}

impl ObserverSpec {
    pub fn build(w: &LstmWeights, gains: ObserverGains, cfg: &ObserverConfig) -> Result<Self> {
        if !(cfg.d_max >= 0.0) || !(cfg.q_o > 0.0) {
            return Err(Error::Argument("d_max must be >= 0 and q_o > 0".into()));
        }
        let (b, mats) = observer_matrices(w, &gains, cfg.d_max)?;
        let rho_a_d = spectral_radius(&mats.a_d)?;
        if rho_a_d >= 1.0 {
            return Err(Error::Unstable { rho: rho_a_d });
        }
        let err = ErrorBox::from_sets(w.n, w.p, b.c_radius, mats.c_hat_radius, cfg.d_max);
        let constants = derive_constants(&mats.a_d, &Mat::identity(3).scale(cfg.q_o), &w.w_y, &err)?;
        let l_mat = l_matrix(w, &gains, &b, &mats);
        let l_max = induced_two_norm(&l_mat) / constants.c_ol;
        let p33 = constants.p_o[(2, 2)];
        let (w_max, w_bar) = match (cfg.w_max, cfg.w_bar) {
            (Some(wm), Some(wb)) => (wm, wb),
            (Some(wm), None) => (wm, w_bar_triangle(p33, wm)),
            (None, Some(wb)) => (wb / p33.sqrt(), wb),
            (None, None) => (0.0, 0.0),
        };
        if w_max < 0.0 || !w_max.is_finite() {
            return Err(Error::Argument(format!("w_max = {w_max} must be finite and >= 0")));
        }
        if w_bar < 0.0 || !w_bar.is_finite() {
            return Err(Error::Argument(format!("w_bar = {w_bar} must be finite and >= 0")));
        }
        let w_bar_analytic = w_bar_bound(constants.cross_max, p33, w_max);
        Ok(ObserverSpec {
            gains,
            d_max: cfg.d_max,
            matrices: mats,
            rho_a_d,
            constants,
            error_box: err,
            l_mat,
            l_max,
            w_max,
            w_bar,
            w_bar_analytic,
            w_bar_triangle: w_bar_triangle(p33, w_max),
        })
    }

    pub fn rho_o(&self) -> f64 {
        self.constants.rho_o
    }

    /// Fixed point of `ê⁺ = ρ_o ê + w̄`.
    pub fn e_inf(&self) -> f64 {
        self.w_bar / (1.0 - self.constants.rho_o)
    }
}

fn l_matrix(w: &LstmWeights, g: &ObserverGains, b: &GateBounds, m: &ObserverMatrices) -> Mat {
    let n2 = induced_two_norm;
    let s_hat = m.c_hat_radius;
    let a_bar = 0.25 * s_hat * n2(&g.l_f.matmul(&w.w_y)) + 0.25 * b.sigma_c * n2(&g.l_i.matmul(&w.w_y));
    let b_bar = 0.25 * s_hat * n2(&g.l_f) + 0.25 * b.sigma_c * n2(&g.l_i);
    let g_bar = 0.25 * s_hat.tanh();
    Mat::from_vec(
        3,
        3,
        vec![
            0.0,
            a_bar,
            b_bar,
            0.0,
            g_bar * n2(&g.l_o.matmul(&w.w_y)) + b.sigma_o * a_bar,
            g_bar * n2(&g.l_o) + b.sigma_o * b_bar,
            0.0,
            n2(&g.l_d.matmul(&w.w_y)),
            n2(&g.l_d),
        ],
    )
    .expect("finite")
}

/// Build the observer for `w` according to `cfg.strategy`.
pub fn select_gains(w: &LstmWeights, cfg: &ObserverConfig) -> Result<ObserverSpec> {
    match cfg.strategy {
        GainStrategy::Suboptimal { l_d } => {
            ObserverSpec::build(w, ObserverGains::suboptimal(w.n, w.p, l_d)?, cfg)
        }
        GainStrategy::Search {
            l_d,
            seed,
            budget,
            step,
        } => {
            let start = ObserverGains::suboptimal(w.n, w.p, l_d)?;
            let rho_of = |g: &ObserverGains| -> f64 {
                observer_matrices(w, g, cfg.d_max)
                    .ok()
                    .and_then(|(_, m)| spectral_radius(&m.a_d).ok())
                    .unwrap_or(f64::INFINITY)
            };
            let mut best = start;
            let mut best_rho = rho_of(&best);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..budget {
                let mut cand = best.clone();
                for m in [&mut cand.l_f, &mut cand.l_i, &mut cand.l_o, &mut cand.l_d] {
                    for v in m.data_mut() {
                        *v += rng.random_range(-step..step);
                    }
                }
                let r = rho_of(&cand);
                if r < best_rho {
                    best = cand;
                    best_rho = r;
                }
            }
            if best_rho >= 1.0 {
                return Err(Error::GainSelection(format!(
                    "no gains with rho(A_d) < 1 after {budget} samples (best {best_rho:.4})"
                )));
            }
            ObserverSpec::build(w, best, cfg)
        }
    }
}

fn sat(v: f64, d_max: f64) -> f64 {
    v.clamp(-d_max, d_max)
}

/// One observer update from the measurement `y` taken at the current step.
pub fn observer_step(
    w: &LstmWeights,
    spec: &ObserverSpec,
    chi_hat: &AugmentedState,
    u: &[f64],
    y: &[f64],
) -> Result<AugmentedState> {
    if y.len() != w.p || u.len() != w.m || chi_hat.x.c.len() != w.n || chi_hat.x.h.len() != w.n {
        return Err(Error::Dimension("observer_step: size mismatch".into()));
    }
    let y_hat = augmented_output(w, chi_hat)?;
    let e = sub_vec(y, &y_hat);
    let g = &spec.gains;
    let (ef, ei, eo) = (g.l_f.matvec(&e), g.l_i.matvec(&e), g.l_o.matvec(&e));
    let x = step_injected(w, &chi_hat.x, u, Some([&ef, &ei, &eo]));
    let ld = g.l_d.matvec(&e);
    let d = chi_hat
        .d
        .iter()
        .zip(&ld)
        .map(|(a, b)| sat(a + b, spec.d_max))
        .collect();
    Ok(AugmentedState { x, d })
}

/// Stacked error norms `[‖ĉ−c‖, ‖ĥ−h‖, ‖d̂−d‖]`.
pub fn error_norms(a: &AugmentedState, b: &AugmentedState) -> [f64; 3] {
    [
        norm2(&sub_vec(&a.x.c, &b.x.c)),
        norm2(&sub_vec(&a.x.h, &b.x.h)),
        norm2(&sub_vec(&a.d, &b.d)),
    ]
}

/// `V_o(χ̂, χ) = ‖[‖ĉ−c‖; ‖ĥ−h‖; ‖d̂−d‖]‖_{P_o}`
pub fn v_o(spec: &ObserverSpec, chi_hat: &AugmentedState, chi: &AugmentedState) -> f64 {
    let z = error_norms(chi_hat, chi);
    spec.constants.p_o.quad_form(&z).max(0.0).sqrt()
}

/// Membership of `χ̂` in the observer's invariant set `Ĉ × H × D`.
pub fn in_observer_set(spec: &ObserverSpec, chi_hat: &AugmentedState, slack: f64) -> bool {
    let r = spec.matrices.c_hat_radius;
    chi_hat.x.c.iter().all(|c| c.abs() <= r + slack)
        && chi_hat.x.h.iter().all(|h| h.abs() <= 1.0 + slack)
        && chi_hat.d.iter().all(|d| d.abs() <= spec.d_max + slack)
}
