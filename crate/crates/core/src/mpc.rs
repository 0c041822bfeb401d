//! Robust FHOCP: constraint tightening, ê_o bookkeeping, the time-varying
//! terminal set, the optimizer and the receding-horizon law.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{self, step_vjp, LstmState, LstmWeights, StabilityCertificate};
use crate::numerics::{eig_extrema_spd, norm2, solve_discrete_lyapunov, sub_vec, Mat};
use crate::observer::ObserverSpec;
use crate::refcalc::{InputBox, ReferencePair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TighteningSchedule {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub rho_o: f64,
    pub rho_s: f64,
    pub c_su: f64,
    pub l_max: f64,
    pub w_bar: f64,
    pub c_s: Vec<f64>,
    pub c_o: Vec<f64>,
}

impl TighteningSchedule {
    pub fn horizon(&self) -> usize {
        self.a.len() - 1
    }

    /// Fixed point of the ê_o recursion.
    pub fn e_inf(&self) -> f64 {
        self.w_bar / (1.0 - self.rho_o)
    }
}

/// `a₀ = c_o`, `b₀ = 0`, `a_{i+1} = ρ_o a_i + ρ_sⁱ c_su L_max c_s`, `b_{i+1} = b_i + a_i w̄`.
pub fn schedule_from(
    rho_o: f64,
    rho_s: f64,
    c_su: f64,
    l_max: f64,
    w_bar: f64,
    c_s: &[f64],
    c_o: &[f64],
    horizon: usize,
) -> TighteningSchedule {
    let p = c_o.len();
    let mut a = vec![c_o.to_vec()];
    let mut b = vec![vec![0.0; p]];
    for i in 0..horizon {
        let g = rho_s.powi(i as i32) * c_su * l_max;
        let an = (0..p).map(|j| rho_o * a[i][j] + g * c_s[j]).collect();
        let bn = (0..p).map(|j| b[i][j] + a[i][j] * w_bar).collect();
        a.push(an);
        b.push(bn);
    }
    TighteningSchedule {
        a,
        b,
        rho_o,
        rho_s,
        c_su,
        l_max,
        w_bar,
        c_s: c_s.to_vec(),
        c_o: c_o.to_vec(),
    }
}

pub fn build_schedule(cert: &StabilityCertificate, spec: &ObserverSpec, horizon: usize) -> TighteningSchedule {
    schedule_from(
        spec.constants.rho_o,
        cert.rho_s,
        cert.c_su,
        spec.l_max,
        spec.w_bar,
        &cert.c_s,
        &spec.constants.c_o,
        horizon,
    )
}

/// `ê⁺ = ρ_o ê + w̄`
pub fn eo_step(e_o: f64, rho_o: f64, w_bar: f64) -> f64 {
    rho_o * e_o + w_bar
}

/// Terminal weight with `A_δᵀ P_f A_δ − P_f = −1.1 q I`.
pub fn compute_pf(a_delta: &Mat, q: f64) -> Result<Mat> {
    if !(q > 0.0) {
        return Err(Error::Argument(format!("q = {q} must be positive")));
    }
    solve_discrete_lyapunov(a_delta, &Mat::identity(a_delta.rows()).scale(1.1 * q))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalData {
    pub p_f: Mat,
    pub q: f64,
    pub alpha_k: f64,
    pub e_tilde: f64,
}

/// Per-output admissible set-point interval for a given `ẽ_o`.
pub fn admissible_band(
    sched: &TighteningSchedule,
    y_lb: &[f64],
    y_ub: &[f64],
    d_max: f64,
    e_tilde: f64,
) -> Vec<(f64, f64)> {
    let n = sched.horizon();
    (0..y_ub.len())
        .map(|j| {
            let m = 2.0 * d_max + sched.a[n][j] * e_tilde + sched.b[n][j];
            (y_lb[j] + m, y_ub[j] - m)
        })
        .collect()
}

/// `α(k) = min_j min(α_ub_j, α_lb_j)`, with `ẽ_o = max(ê_o, ē_∞)`.
#[allow(clippy::too_many_arguments)]
pub fn terminal_alpha(
    sched: &TighteningSchedule,
    p_f: &Mat,
    w_y: &Mat,
    y0: &[f64],
    y_lb: &[f64],
    y_ub: &[f64],
    d_max: f64,
    e_o: f64,
) -> Result<(f64, f64)> {
    let e_tilde = e_o.max(sched.e_inf());
    let (pmin, _) = eig_extrema_spd(p_f)?;
    let n = sched.horizon();
    let mut alpha = f64::INFINITY;
    for j in 0..y0.len() {
        let wn = norm2(w_y.row(j));
        let tight = 2.0 * d_max + sched.a[n][j] * e_tilde + sched.b[n][j];
        let up = y_ub[j] - y0[j] - tight;
        let lo = y0[j] - y_lb[j] - tight;
        for (side, m) in [("upper", up), ("lower", lo)] {
            if !(m > 0.0) {
                return Err(Error::InfeasibleSetpoint {
                    output: j,
                    side,
                    margin: m,
                });
            }
            let a = if wn > 0.0 { pmin.sqrt() / wn * m } else { f64::INFINITY };
            alpha = alpha.min(a);
        }
    }
    Ok((alpha, e_tilde))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub penalty0: f64,
    pub penalty_growth: f64,
    pub penalty_max: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Projected-gradient norm at which the inner loop stops.
    pub tol: f64,
    /// Violation accepted as feasible.
    pub constraint_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            penalty0: 10.0,
            penalty_growth: 10.0,
            penalty_max: 1e9,
            max_outer: 30,
            max_inner: 400,
            tol: 1e-9,
            constraint_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    /// Diagonal of Q over the stacked `[c; h]`; `None` means identity.
    pub q_diag: Option<Vec<f64>>,
    /// Diagonal of R; `None` means identity.
    pub r_diag: Option<Vec<f64>>,
    pub e_o0: f64,
    pub solver: SolverConfig,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: 5,
            q_diag: None,
            r_diag: None,
            e_o0: 0.5,
            solver: SolverConfig::default(),
        }
    }
}

impl MpcConfig {
    pub fn q(&self, n: usize) -> Result<Vec<f64>> {
        diag_or_ones(&self.q_diag, 2 * n, "q_diag")
    }

    pub fn r(&self, m: usize) -> Result<Vec<f64>> {
        diag_or_ones(&self.r_diag, m, "r_diag")
    }
}

fn diag_or_ones(d: &Option<Vec<f64>>, len: usize, name: &str) -> Result<Vec<f64>> {
    match d {
        None => Ok(vec![1.0; len]),
        Some(v) if v.len() == len && v.iter().all(|x| *x > 0.0) => Ok(v.clone()),
        Some(v) => Err(Error::Argument(format!(
            "{name} needs {len} positive entries, got {v:?}"
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Optimal,
    CandidateFallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    pub u_seq: Vec<Vec<f64>>,
    pub x_seq: Vec<LstmState>,
    pub cost: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub max_violation: f64,
}

/// One FHOCP instance; everything but the input sequence is fixed.
#[derive(Clone, Debug)]
pub struct Fhocp<'a> {
    pub w: &'a LstmWeights,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub p_f: Mat,
    pub x0: LstmState,
    pub x_bar: LstmState,
    pub u_bar: Vec<f64>,
    pub ubox: InputBox,
    /// Right-hand sides at i = 0..N−1: `W_y h_i ≤ y_up[i]` and `W_y h_i ≥ y_dn[i]`.
    pub y_up: Vec<Vec<f64>>,
    pub y_dn: Vec<Vec<f64>>,
    pub alpha: f64,
}

/// Everything the optimizer reports about a candidate sequence.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub cost: f64,
    pub x_seq: Vec<LstmState>,
    /// `g ≤ 0` form: output upper, output lower (each N·p), terminal.
    pub g: Vec<f64>,
}

impl Evaluation {
    pub fn max_violation(&self) -> f64 {
        self.g.iter().fold(0.0f64, |a, v| a.max(*v))
    }
}

impl<'a> Fhocp<'a> {
    /// Assemble the instance of the displayed problem.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w: &'a LstmWeights,
        cfg: &MpcConfig,
        p_f: &Mat,
        sched: &TighteningSchedule,
        x_hat: &LstmState,
        e_o: f64,
        reference: &ReferencePair,
        ubox: &InputBox,
        y_lb: &[f64],
        y_ub: &[f64],
        d_max: f64,
        alpha: f64,
    ) -> Result<Self> {
        let n_h = sched.horizon();
        if n_h == 0 {
            return Err(Error::Argument("horizon must be >= 1".into()));
        }
        let mut y_up = Vec::with_capacity(n_h);
        let mut y_dn = Vec::with_capacity(n_h);
        for i in 0..n_h {
            y_up.push(
                (0..w.p)
                    .map(|j| y_ub[j] - sched.a[i][j] * e_o - sched.b[i][j] - d_max - w.b_y[j])
                    .collect(),
            );
            y_dn.push(
                (0..w.p)
                    .map(|j| y_lb[j] + sched.a[i][j] * e_o + sched.b[i][j] + d_max - w.b_y[j])
                    .collect(),
            );
        }
        Ok(Fhocp {
            w,
            q: cfg.q(w.n)?,
            r: cfg.r(w.m)?,
            p_f: p_f.clone(),
            x0: x_hat.clone(),
            x_bar: reference.x_bar.clone(),
            u_bar: reference.u_bar.clone(),
            ubox: ubox.clone(),
            y_up,
            y_dn,
            alpha,
        })
    }

    pub fn horizon(&self) -> usize {
        self.y_up.len()
    }

    fn rollout(&self, us: &[Vec<f64>]) -> Vec<LstmState> {
        let mut xs = Vec::with_capacity(us.len() + 1);
        xs.push(self.x0.clone());
        for u in us {
            let nx = lstm::step_injected(self.w, xs.last().expect("nonempty"), u, None);
            xs.push(nx);
        }
        xs
    }

    fn terminal_parts(&self, x: &LstmState) -> (Vec<f64>, Vec<f64>, f64, f64) {
        let dc = sub_vec(&x.c, &self.x_bar.c);
        let dh = sub_vec(&x.h, &self.x_bar.h);
        let (nc, nh) = (norm2(&dc), norm2(&dh));
        (dc, dh, nc, nh)
    }

    pub fn evaluate(&self, us: &[Vec<f64>]) -> Evaluation {
        let xs = self.rollout(us);
        let n_h = self.horizon();
        let xb = self.x_bar.stacked();
        let mut cost = 0.0;
        for i in 0..n_h {
            let dx = sub_vec(&xs[i].stacked(), &xb);
            cost += dx.iter().zip(&self.q).map(|(d, q)| q * d * d).sum::<f64>();
            let du = sub_vec(&us[i], &self.u_bar);
            cost += du.iter().zip(&self.r).map(|(d, r)| r * d * d).sum::<f64>();
        }
        let (_, _, nc, nh) = self.terminal_parts(&xs[n_h]);
        let vt = self.p_f.quad_form(&[nc, nh]);
        cost += vt;
        let mut g = Vec::with_capacity(2 * n_h * self.w.p + 1);
        for i in 0..n_h {
            let y = self.w.w_y.matvec(&xs[i].h);
            for j in 0..self.w.p {
                g.push(y[j] - self.y_up[i][j]);
            }
            for j in 0..self.w.p {
                g.push(self.y_dn[i][j] - y[j]);
            }
        }
        g.push(vt - self.alpha * self.alpha);
        Evaluation { cost, x_seq: xs, g }
    }

    /// Augmented Lagrangian value and gradient: `J + 1/(2μ) Σ (max(0, λ+μg)² − λ²)`.
    fn lagrangian(&self, us: &[Vec<f64>], lam: &[f64], mu: f64) -> (f64, Vec<Vec<f64>>) {
        let w = self.w;
        let n = w.n;
        let n_h = self.horizon();
        let ev = self.evaluate(us);
        let xs = &ev.x_seq;
        let mut val = ev.cost;
        // multipliers of the penalty terms, `max(0, λ + μ g)`
        let nu: Vec<f64> = ev.g.iter().zip(lam).map(|(g, l)| (l + mu * g).max(0.0)).collect();
        for (v, l) in nu.iter().zip(lam) {
            val += (v * v - l * l) / (2.0 * mu);
        }
        let xb = self.x_bar.stacked();

        // terminal adjoint
        let (dc, dh, nc, nh) = self.terminal_parts(&xs[n_h]);
        let scale = 1.0 + nu[nu.len() - 1];
        let gv = self.p_f.matvec(&[nc, nh]);
        let (kc, kh) = (
            if nc > 0.0 { 2.0 * scale * gv[0] / nc } else { 0.0 },
            if nh > 0.0 { 2.0 * scale * gv[1] / nh } else { 0.0 },
        );
        let mut ac: Vec<f64> = dc.iter().map(|v| kc * v).collect();
        let mut ah: Vec<f64> = dh.iter().map(|v| kh * v).collect();
        let mut grad = vec![vec![0.0; w.m]; n_h];
        for i in (0..n_h).rev() {
            // x_{i+1} = f(x_i, u_i)
            let (gc, gh, gu) = step_vjp(w, &xs[i], &us[i], &ac, &ah);
            for (k, g) in gu.iter().enumerate() {
                grad[i][k] = g + 2.0 * self.r[k] * (us[i][k] - self.u_bar[k]);
            }
            ac = gc;
            ah = gh;
            if i == 0 {
                break;
            }
            // stage cost and output constraints on x_i
            let xi = xs[i].stacked();
            for k in 0..n {
                ac[k] += 2.0 * self.q[k] * (xi[k] - xb[k]);
                ah[k] += 2.0 * self.q[n + k] * (xi[n + k] - xb[n + k]);
            }
            let base = 2 * i * w.p;
            for j in 0..w.p {
                let s = nu[base + j] - nu[base + w.p + j];
                if s != 0.0 {
                    for (a, wy) in ah.iter_mut().zip(w.w_y.row(j)) {
                        *a += s * wy;
                    }
                }
            }
        }
        (val, grad)
    }

    fn project(&self, us: &mut [Vec<f64>]) {
        for u in us.iter_mut() {
            self.ubox.project(u);
        }
    }

    /// Projected gradient descent with backtracking; returns (iterate, steps).
    fn inner(&self, mut us: Vec<Vec<f64>>, lam: &[f64], mu: f64, cfg: &SolverConfig) -> (Vec<Vec<f64>>, usize) {
        let (mut val, mut grad) = self.lagrangian(&us, lam, mu);
        let mut t = 1.0;
        for it in 0..cfg.max_inner {
            let mut trial = step_along(&us, &grad, 1.0);
            self.project(&mut trial);
            let pg: f64 = flat_diff(&trial, &us).iter().map(|v| v * v).sum::<f64>().sqrt();
            if pg < cfg.tol {
                return (us, it);
            }
            let mut accepted = false;
            for _ in 0..60 {
                let mut cand = step_along(&us, &grad, t);
                self.project(&mut cand);
                let d = flat_diff(&cand, &us);
                let decrease: f64 = d.iter().zip(grad.iter().flatten()).map(|(a, b)| a * b).sum();
                let (cv, cg) = self.lagrangian(&cand, lam, mu);
                if cv <= val + 1e-4 * decrease {
                    let moved = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                    us = cand;
                    val = cv;
                    grad = cg;
                    accepted = true;
                    // let the step grow again after easy acceptances
                    t *= 2.0;
                    if moved < 1e-15 {
                        return (us, it + 1);
                    }
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                return (us, it + 1);
            }
        }
        (us, cfg.max_inner)
    }

    /// Augmented-Lagrangian solve from `init` (projected onto the box first).
    pub fn optimize(&self, init: &[Vec<f64>], cfg: &SolverConfig) -> (Vec<Vec<f64>>, usize) {
        let mut us = init.to_vec();
        self.project(&mut us);
        let ng = 2 * self.horizon() * self.w.p + 1;
        let mut lam = vec![0.0; ng];
        let mut mu = cfg.penalty0;
        let mut iters = 0;
        let mut prev_viol = f64::INFINITY;
        for _ in 0..cfg.max_outer {
            let (u2, k) = self.inner(us, &lam, mu, cfg);
            us = u2;
            iters += k;
            let ev = self.evaluate(&us);
            let viol = ev.max_violation();
            let mut moved = false;
            for (l, g) in lam.iter_mut().zip(&ev.g) {
                let nl = (*l + mu * g).max(0.0);
                moved |= (nl - *l).abs() > 1e-12;
                *l = nl;
            }
            if viol <= cfg.constraint_tol && (k == 0 || !moved) {
                break;
            }
            if viol > 0.25 * prev_viol {
                mu = (mu * cfg.penalty_growth).min(cfg.penalty_max);
            }
            prev_viol = viol;
        }
        (us, iters)
    }
}

fn step_along(us: &[Vec<f64>], g: &[Vec<f64>], t: f64) -> Vec<Vec<f64>> {
    us.iter()
        .zip(g)
        .map(|(u, gi)| u.iter().zip(gi).map(|(a, b)| a - t * b).collect())
        .collect()
}

fn flat_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| x - y).collect()
}

/// Shift left and append `ū`.
pub fn shifted_candidate(prev: &[Vec<f64>], u_bar: &[f64]) -> Vec<Vec<f64>> {
    let mut s: Vec<Vec<f64>> = prev.iter().skip(1).cloned().collect();
    s.push(u_bar.to_vec());
    s
}

/// Solve the FHOCP starting from `candidate` (or `ū` repeated).
///
/// The returned solution never costs more than a feasible candidate: when
/// the optimizer cannot improve on it, the candidate itself is returned.
pub fn solve_fhocp(prob: &Fhocp, candidate: Option<&[Vec<f64>]>, cfg: &SolverConfig) -> Result<MpcSolution> {
    let n_h = prob.horizon();
    let hold: Vec<Vec<f64>> = vec![prob.u_bar.clone(); n_h];
    let mut starts: Vec<Vec<Vec<f64>>> = Vec::new();
    if let Some(c) = candidate {
        if c.len() != n_h || c.iter().any(|u| u.len() != prob.w.m) {
            return Err(Error::Dimension("candidate sequence shape".into()));
        }
        starts.push(c.to_vec());
    }
    if candidate.map(|c| c != hold.as_slice()).unwrap_or(true) {
        starts.push(hold);
    }
    let tol = cfg.constraint_tol;
    let cand_eval = candidate.map(|c| (c.to_vec(), prob.evaluate(c)));
    let mut best: Option<(Vec<Vec<f64>>, Evaluation, usize)> = None;
    let mut total = 0;
    for s in &starts {
        let (us, it) = prob.optimize(s, cfg);
        total += it;
        let ev = prob.evaluate(&us);
        if ev.max_violation() > tol {
            continue;
        }
        // strictly better only, so the candidate-seeded iterate wins ties
        if best.as_ref().map(|(_, b, _)| ev.cost < b.cost - 1e-12).unwrap_or(true) {
            best = Some((us, ev, it));
        }
    }
    let make = |u_seq: Vec<Vec<f64>>, ev: Evaluation, status, iterations| MpcSolution {
        max_violation: ev.max_violation(),
        u_seq,
        x_seq: ev.x_seq,
        cost: ev.cost,
        status,
        iterations,
    };
    let cand_ok = cand_eval
        .as_ref()
        .filter(|(c, e)| e.max_violation() <= tol && prob.ubox_contains(c));
    match (best, cand_ok) {
        (Some((_, ev, _)), Some((c, ce))) if ev.cost > ce.cost => {
            Ok(make(c.clone(), ce.clone(), SolveStatus::CandidateFallback, total))
        }
        (Some((us, ev, _)), _) => Ok(make(us, ev, SolveStatus::Optimal, total)),
        (None, Some((c, ce))) => Ok(make(c.clone(), ce.clone(), SolveStatus::CandidateFallback, total)),
        (None, None) => Err(Error::FeasibilityLoss(format!(
            "no feasible input sequence (candidate violation {:?})",
            cand_eval.map(|(_, e)| e.max_violation())
        ))),
    }
}

impl Fhocp<'_> {
    fn ubox_contains(&self, us: &[Vec<f64>]) -> bool {
        us.iter().all(|u| self.ubox.contains(u, 0.0))
    }
}

/// Receding-horizon law: first element of the solution.
pub fn control_law(sol: &MpcSolution) -> Vec<f64> {
    sol.u_seq[0].clone()
}

/// Controller state kept between calls: the previous solution only.
#[derive(Clone, Debug, Default)]
pub struct Controller {
    pub previous: Option<MpcSolution>,
}

impl Controller {
    /// Shifted candidate for the current step, if a previous solution exists.
    pub fn candidate(&self, u_bar: &[f64]) -> Option<Vec<Vec<f64>>> {
        self.previous.as_ref().map(|p| shifted_candidate(&p.u_seq, u_bar))
    }

    pub fn step(&mut self, prob: &Fhocp, cfg: &SolverConfig) -> Result<(Vec<f64>, MpcSolution)> {
        let cand = self.candidate(&prob.u_bar);
        let sol = solve_fhocp(prob, cand.as_deref(), cfg)?;
        let u = control_law(&sol);
        self.previous = Some(sol.clone());
        Ok((u, sol))
    }
}
