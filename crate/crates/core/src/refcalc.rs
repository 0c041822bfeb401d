//! Equilibrium set-points `(x̄, ū)` for a target output, and the sensitivity
//! constant K̄ of the set-point map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{self, LstmState, LstmWeights};
use crate::numerics::{condition_estimate, induced_two_norm, norm2, solve_linear, Mat};

const FD_EPS: f64 = 1e-6;
const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 50;
const COND_MAX: f64 = 1e12;
const CONTINUATION_STEPS: usize = 10;
const COLD_START_STEPS: usize = 500;
/// Bound on the stored residual of an accepted solution.
pub const RESIDUAL_MAX: f64 = 1e-9;

/// Componentwise input box `lo ≤ u ≤ hi` (normalized units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl InputBox {
    pub fn symmetric(m: usize, r: f64) -> Self {
        InputBox {
            lo: vec![-r; m],
            hi: vec![r; m],
        }
    }

    pub fn contains(&self, u: &[f64], tol: f64) -> bool {
        u.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol)
    }

    pub fn project(&self, u: &mut [f64]) {
        for (v, (l, h)) in u.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferencePair {
    pub x_bar: LstmState,
    pub u_bar: Vec<f64>,
    /// `‖f(x̄,ū) − x̄‖ + ‖g(x̄) + d̂ − y⁰‖`
    pub residual: f64,
    /// `y⁰ − d̂`, the only combination the root problem depends on.
    pub target: Vec<f64>,
    /// Newton iterations spent on the final solve.
    pub iterations: usize,
}

fn check_dims(w: &LstmWeights, y: &[f64]) -> Result<()> {
    if w.m != w.p {
        return Err(Error::Argument(format!(
            "reference calculator needs as many inputs as outputs (m = {}, p = {})",
            w.m, w.p
        )));
    }
    if y.len() != w.p {
        return Err(Error::Dimension("target size".into()));
    }
    Ok(())
}

fn split(w: &LstmWeights, xi: &[f64]) -> (LstmState, Vec<f64>) {
    let n = w.n;
    (
        LstmState {
            c: xi[..n].to_vec(),
            h: xi[n..2 * n].to_vec(),
        },
        xi[2 * n..].to_vec(),
    )
}

/// `F(ξ) = [f(x,u) − x; g(x) − target]`.
fn root_fn(w: &LstmWeights, xi: &[f64], target: &[f64]) -> Vec<f64> {
    let (x, u) = split(w, xi);
    let nx = lstm::step_injected(w, &x, &u, None);
    let mut r: Vec<f64> = nx.stacked().iter().zip(x.stacked()).map(|(a, b)| a - b).collect();
    let y = w.w_y.matvec(&x.h);
    r.extend((0..w.p).map(|j| y[j] + w.b_y[j] - target[j]));
    r
}

fn split_residual(w: &LstmWeights, r: &[f64]) -> f64 {
    norm2(&r[..2 * w.n]) + norm2(&r[2 * w.n..])
}

/// Jacobian of the root problem by central differences.
fn jacobian(w: &LstmWeights, xi: &[f64], target: &[f64]) -> Mat {
    let d = xi.len();
    let mut j = Mat::zeros(d, d);
    let mut xp = xi.to_vec();
    for k in 0..d {
        let v = xp[k];
        xp[k] = v + FD_EPS;
        let fp = root_fn(w, &xp, target);
        xp[k] = v - FD_EPS;
        let fm = root_fn(w, &xp, target);
        xp[k] = v;
        for r in 0..d {
            j[(r, k)] = (fp[r] - fm[r]) / (2.0 * FD_EPS);
        }
    }
    j
}

enum Newton {
    Converged(Vec<f64>, usize),
    Failed,
}

fn newton(w: &LstmWeights, mut xi: Vec<f64>, target: &[f64]) -> Result<Newton> {
    let mut f = root_fn(w, &xi, target);
    let mut fn_ = norm2(&f);
    for it in 0..NEWTON_MAX_ITER {
        if fn_ < NEWTON_TOL {
            return Ok(Newton::Converged(xi, it));
        }
        let j = jacobian(w, &xi, target);
        let cond = condition_estimate(&j);
        if cond > COND_MAX {
            return Err(Error::Assumption(format!(
                "reference Jacobian is singular (condition estimate {cond:.3e})"
            )));
        }
        let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        let dx = solve_linear(&j, &rhs)?;
        // backtracking on the residual norm
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = xi.iter().zip(&dx).map(|(a, b)| a + t * b).collect();
            let fc = root_fn(w, &cand, target);
            let nc = norm2(&fc);
            if nc <= (1.0 - 1e-4 * t) * fn_ || t < 1e-6 {
                if !nc.is_finite() {
                    return Ok(Newton::Failed);
                }
                xi = cand;
                f = fc;
                fn_ = nc;
                break;
            }
            t *= 0.5;
        }
    }
    if split_residual(w, &f) <= RESIDUAL_MAX {
        Ok(Newton::Converged(xi, NEWTON_MAX_ITER))
    } else {
        Ok(Newton::Failed)
    }
}

fn cold_start(w: &LstmWeights) -> Result<Vec<f64>> {
    let u = vec![0.0; w.m];
    let (x, _) = lstm::attractor(w, &u, &LstmState::zeros(w.n), COLD_START_STEPS, 0.0)?;
    let mut xi = x.stacked();
    xi.extend(u);
    Ok(xi)
}

fn finish(w: &LstmWeights, xi: Vec<f64>, target: Vec<f64>, it: usize, ubox: &InputBox) -> Result<ReferencePair> {
    let r = root_fn(w, &xi, &target);
    let (x_bar, u_bar) = split(w, &xi);
    if !ubox.contains(&u_bar, 1e-12) {
        return Err(Error::InfeasibleReference(format!(
            "equilibrium input {u_bar:?} outside [{:?}, {:?}] for target {target:?}",
            ubox.lo, ubox.hi
        )));
    }
    Ok(ReferencePair {
        x_bar,
        u_bar,
        residual: split_residual(w, &r),
        target,
        iterations: it,
    })
}

/// Solve `x̄ = f(x̄, ū)`, `y⁰ = g(x̄) + d̂` by Newton's method.
///
/// Starts from `warm` when given (the previous step's pair) and otherwise from
/// the attractor of `u = 0`. If Newton fails from a warm start, the target is
/// walked from the warm start's target in equal sub-steps.
pub fn solve_reference(
    w: &LstmWeights,
    y0: &[f64],
    d_hat: &[f64],
    warm: Option<&ReferencePair>,
    ubox: &InputBox,
) -> Result<ReferencePair> {
    check_dims(w, y0)?;
    if d_hat.len() != w.p {
        return Err(Error::Dimension("disturbance size".into()));
    }
    let target: Vec<f64> = y0.iter().zip(d_hat).map(|(a, b)| a - b).collect();
    let start = match warm {
        Some(r) => {
            let mut xi = r.x_bar.stacked();
            xi.extend(&r.u_bar);
            xi
        }
        None => cold_start(w)?,
    };
    if let Newton::Converged(xi, it) = newton(w, start.clone(), &target)? {
        return finish(w, xi, target, it, ubox);
    }
    let from = match warm {
        Some(r) => r.target.clone(),
        None => {
            let (x, _) = split(w, &start);
            lstm::output(w, &x)?
        }
    };
    let mut xi = start;
    let mut it = 0;
    for s in 1..=CONTINUATION_STEPS {
        let t = s as f64 / CONTINUATION_STEPS as f64;
        let tgt: Vec<f64> = from.iter().zip(&target).map(|(a, b)| a + t * (b - a)).collect();
        match newton(w, xi, &tgt)? {
            Newton::Converged(x, k) => {
                xi = x;
                it = k;
            }
            Newton::Failed => {
                return Err(Error::NoConvergence(format!(
                    "Newton failed at continuation sub-step {s} toward target {target:?}"
                )))
            }
        }
    }
    finish(w, xi, target, it, ubox)
}

/// Local sensitivity `‖∂x̄/∂(y⁰ − d̂)‖` at a solved pair.
pub fn local_sensitivity(w: &LstmWeights, r: &ReferencePair) -> Result<f64> {
    let mut xi = r.x_bar.stacked();
    xi.extend(&r.u_bar);
    let j = jacobian(w, &xi, &r.target);
    let d = xi.len();
    let nn = 2 * w.n;
    // K = J⁻¹ [0; I]; only the state rows matter.
    let mut k = Mat::zeros(nn, w.p);
    for col in 0..w.p {
        let mut e = vec![0.0; d];
        e[nn + col] = 1.0;
        let s = solve_linear(&j, &e)?;
        for row in 0..nn {
            k[(row, col)] = s[row];
        }
    }
    Ok(induced_two_norm(&k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KBarEstimate {
    pub k_bar: f64,
    /// `(y⁰, d̂)` attaining the maximum.
    pub argmax: (f64, f64),
    pub points: usize,
    /// Grid points without an admissible reference; nonempty means partial coverage.
    pub failed: Vec<(f64, f64)>,
}

/// Maximize the local sensitivity over a `density × density` grid of
/// `(y⁰, d̂)` (each applied to every output channel).
pub fn estimate_k_bar(
    w: &LstmWeights,
    y0_range: (f64, f64),
    d_range: (f64, f64),
    density: usize,
    ubox: &InputBox,
) -> Result<KBarEstimate> {
    if density == 0 {
        return Err(Error::Argument("grid density must be >= 1".into()));
    }
    let pts = |(lo, hi): (f64, f64)| -> Vec<f64> {
        if density == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            (0..density).map(|k| lo + (hi - lo) * k as f64 / (density - 1) as f64).collect()
        }
    };
    let mut best = KBarEstimate {
        k_bar: 0.0,
        argmax: (f64::NAN, f64::NAN),
        points: 0,
        failed: Vec::new(),
    };
    for d in pts(d_range) {
        let mut warm: Option<ReferencePair> = None;
        for y in pts(y0_range) {
            let yv = vec![y; w.p];
            let dv = vec![d; w.p];
            match solve_reference(w, &yv, &dv, warm.as_ref(), ubox) {
                Ok(r) => {
                    let k = local_sensitivity(w, &r)?;
                    best.points += 1;
                    if k > best.k_bar {
                        best.k_bar = k;
                        best.argmax = (y, d);
                    }
                    warm = Some(r);
                }
                Err(Error::InfeasibleReference(_)) | Err(Error::NoConvergence(_)) | Err(Error::Assumption(_)) => {
                    best.failed.push((y, d))
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(best)
}
