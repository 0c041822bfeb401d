//! Single-layer LSTM state-space model and its incremental stability analysis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dot, eig_extrema_spd, induced_inf_norm, induced_two_norm, norm2, solve_discrete_lyapunov,
    spectral_radius, sub_vec, Mat,
};

/// Logistic function, split by sign so large |z| never overflows `exp`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmWeights {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub u_max: f64,
    #[serde(rename = "W_f")]
    pub w_f: Mat,
    #[serde(rename = "W_i")]
    pub w_i: Mat,
    #[serde(rename = "W_c")]
    pub w_c: Mat,
    #[serde(rename = "W_o")]
    pub w_o: Mat,
    #[serde(rename = "U_f")]
    pub u_f: Mat,
    #[serde(rename = "U_i")]
    pub u_i: Mat,
    #[serde(rename = "U_c")]
    pub u_c: Mat,
    #[serde(rename = "U_o")]
    pub u_o: Mat,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
    #[serde(rename = "W_y")]
    pub w_y: Mat,
    pub b_y: Vec<f64>,
}

/// Gate indices in the order f, i, c, o.
pub const GATES: [&str; 4] = ["f", "i", "c", "o"];

impl LstmWeights {
    pub fn zeros(n: usize, m: usize, p: usize, u_max: f64) -> Self {
        LstmWeights {
            n,
            m,
            p,
            u_max,
            w_f: Mat::zeros(n, m),
            w_i: Mat::zeros(n, m),
            w_c: Mat::zeros(n, m),
            w_o: Mat::zeros(n, m),
            u_f: Mat::zeros(n, n),
            u_i: Mat::zeros(n, n),
            u_c: Mat::zeros(n, n),
            u_o: Mat::zeros(n, n),
            b_f: vec![0.0; n],
            b_i: vec![0.0; n],
            b_c: vec![0.0; n],
            b_o: vec![0.0; n],
            w_y: Mat::zeros(p, n),
            b_y: vec![0.0; p],
        }
    }

    pub fn w(&self, g: usize) -> &Mat {
        [&self.w_f, &self.w_i, &self.w_c, &self.w_o][g]
    }

    pub fn u(&self, g: usize) -> &Mat {
        [&self.u_f, &self.u_i, &self.u_c, &self.u_o][g]
    }

    pub fn b(&self, g: usize) -> &[f64] {
        [&self.b_f, &self.b_i, &self.b_c, &self.b_o][g]
    }

    /// Flat views of every trainable tensor, in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        vec![
            self.w_f.data(),
            self.w_i.data(),
            self.w_c.data(),
            self.w_o.data(),
            self.u_f.data(),
            self.u_i.data(),
            self.u_c.data(),
            self.u_o.data(),
            &self.b_f[..],
            &self.b_i[..],
            &self.b_c[..],
            &self.b_o[..],
            self.w_y.data(),
            &self.b_y[..],
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_f.data_mut(),
            self.w_i.data_mut(),
            self.w_c.data_mut(),
            self.w_o.data_mut(),
            self.u_f.data_mut(),
            self.u_i.data_mut(),
            self.u_c.data_mut(),
            self.u_o.data_mut(),
            &mut self.b_f[..],
            &mut self.b_i[..],
            &mut self.b_c[..],
            &mut self.b_o[..],
            self.w_y.data_mut(),
            &mut self.b_y[..],
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, p) = (self.n, self.m, self.p);
        let shape = |mat: &Mat, r: usize, c: usize, name: &str| {
            if mat.rows() != r || mat.cols() != c {
                Err(Error::Dimension(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    mat.rows(),
                    mat.cols()
                )))
            } else {
                Ok(())
            }
        };
        for g in 0..4 {
            shape(self.w(g), n, m, &format!("W_{}", GATES[g]))?;
            shape(self.u(g), n, n, &format!("U_{}", GATES[g]))?;
            if self.b(g).len() != n {
                return Err(Error::Dimension(format!("b_{} has wrong length", GATES[g])));
            }
        }
        shape(&self.w_y, p, n, "W_y")?;
        if self.b_y.len() != p {
            return Err(Error::Dimension("b_y has wrong length".into()));
        }
        if !(self.u_max > 0.0) {
            return Err(Error::Argument("u_max must be positive".into()));
        }
        if self.params().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Argument("weights must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmState {
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl LstmState {
    pub fn zeros(n: usize) -> Self {
        LstmState {
            c: vec![0.0; n],
            h: vec![0.0; n],
        }
    }

    /// `[c; h]`
    pub fn stacked(&self) -> Vec<f64> {
        [self.c.clone(), self.h.clone()].concat()
    }

    pub fn from_stacked(x: &[f64]) -> Self {
        let n = x.len() / 2;
        LstmState {
            c: x[..n].to_vec(),
            h: x[n..].to_vec(),
        }
    }
}

/// `W u + U h + b` for gate `g`.
pub fn preactivation(w: &LstmWeights, g: usize, h: &[f64], u: &[f64]) -> Vec<f64> {
    let wu = w.w(g).matvec(u);
    let uh = w.u(g).matvec(h);
    (0..w.n).map(|j| wu[j] + uh[j] + w.b(g)[j]).collect()
}

/// Gated update with optional additive terms on the f, i, o preactivations
/// (the observer injects its innovation there).
pub fn step_injected(
    w: &LstmWeights,
    x: &LstmState,
    u: &[f64],
    inject: Option<[&[f64]; 3]>,
) -> LstmState {
    let mut zf = preactivation(w, 0, &x.h, u);
    let mut zi = preactivation(w, 1, &x.h, u);
    let zc = preactivation(w, 2, &x.h, u);
    let mut zo = preactivation(w, 3, &x.h, u);
    if let Some([ef, ei, eo]) = inject {
        for j in 0..w.n {
            zf[j] += ef[j];
            zi[j] += ei[j];
            zo[j] += eo[j];
        }
    }
    let mut c = vec![0.0; w.n];
    let mut h = vec![0.0; w.n];
    for j in 0..w.n {
        c[j] = sigmoid(zf[j]) * x.c[j] + sigmoid(zi[j]) * zc[j].tanh();
        h[j] = sigmoid(zo[j]) * c[j].tanh();
    }
    LstmState { c, h }
}

pub fn step(w: &LstmWeights, x: &LstmState, u: &[f64]) -> Result<LstmState> {
    if x.c.len() != w.n || x.h.len() != w.n || u.len() != w.m {
        return Err(Error::Dimension("step: state or input size mismatch".into()));
    }
    Ok(step_injected(w, x, u, None))
}

pub fn output(w: &LstmWeights, x: &LstmState) -> Result<Vec<f64>> {
    if x.h.len() != w.n {
        return Err(Error::Dimension("output: state size mismatch".into()));
    }
    let wy = w.w_y.matvec(&x.h);
    Ok(wy.iter().zip(&w.b_y).map(|(a, b)| a + b).collect())
}

/// Free-run simulation from `x0`: `ys[k] = g(x_k)`, then `x_{k+1} = f(x_k, us[k])`.
///
/// This matches the sampling convention of the data: the output at `k` is read
/// before the input at `k` is applied.
pub fn simulate(w: &LstmWeights, x0: &LstmState, us: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let mut x = x0.clone();
    let mut ys = Vec::with_capacity(us.len());
    for u in us {
        ys.push(output(w, &x)?);
        x = step(w, &x, u)?;
    }
    Ok(ys)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateBounds {
    pub sigma_f: f64,
    pub sigma_i: f64,
    pub sigma_o: f64,
    pub sigma_c: f64,
    pub sigma_x: f64,
    /// Radius of the invariant set C, `σ̄ⁱσ̄ᶜ/(1−σ̄ᶠ)`.
    pub c_radius: f64,
    pub alpha: f64,
    pub beta: f64,
}

/// `‖[W u_max, U, b]‖_∞` for gate `g`.
pub fn gate_inf_norm(w: &LstmWeights, g: usize) -> f64 {
    let b = Mat::column(w.b(g));
    let cat = Mat::hcat(&[&w.w(g).scale(w.u_max), w.u(g), &b]).expect("validated shapes");
    induced_inf_norm(&cat)
}

pub fn gate_bounds(w: &LstmWeights) -> GateBounds {
    let sigma_f = sigmoid(gate_inf_norm(w, 0));
    let sigma_i = sigmoid(gate_inf_norm(w, 1));
    let sigma_c = gate_inf_norm(w, 2).tanh();
    let sigma_o = sigmoid(gate_inf_norm(w, 3));
    let c_radius = sigma_i * sigma_c / (1.0 - sigma_f);
    let sigma_x = c_radius.tanh();
    let n2 = induced_two_norm;
    let alpha = 0.25 * n2(&w.u_f) * c_radius + sigma_i * n2(&w.u_c) + 0.25 * n2(&w.u_i) * sigma_c;
    let beta = 0.25 * n2(&w.w_f) * c_radius + sigma_i * n2(&w.w_c) + 0.25 * n2(&w.w_i) * sigma_c;
    GateBounds {
        sigma_f,
        sigma_i,
        sigma_o,
        sigma_c,
        sigma_x,
        c_radius,
        alpha,
        beta,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaIss {
    pub bounds: GateBounds,
    pub a_delta: Mat,
    pub b_delta: Mat,
    pub rho_a: f64,
    /// Jury margins; both negative exactly when `rho_a < 1`.
    pub jury_margin_left: f64,
    pub jury_margin_right: f64,
}

impl DeltaIss {
    pub fn certified(&self) -> bool {
        self.rho_a < 1.0
    }
}

/// Jury margins `(r₁, r₂)` from the gate bounds and `‖U_o‖`.
pub fn jury_margins(b: &GateBounds, u_o_norm: f64) -> (f64, f64) {
    let q = 0.25 * b.sigma_x * u_o_norm;
    let r1 = -1.0 + b.sigma_f + b.alpha * b.sigma_o + q - b.sigma_f * q;
    let r2 = b.sigma_f * q - 1.0;
    (r1, r2)
}

pub fn delta_iss_check(w: &LstmWeights) -> DeltaIss {
    let b = gate_bounds(w);
    let uo = induced_two_norm(&w.u_o);
    let wo = induced_two_norm(&w.w_o);
    let a_delta = Mat::from_vec(
        2,
        2,
        vec![
            b.sigma_f,
            b.alpha,
            b.sigma_o * b.sigma_f,
            b.alpha * b.sigma_o + 0.25 * b.sigma_x * uo,
        ],
    )
    .expect("finite bounds");
    let b_delta = Mat::from_vec(2, 1, vec![b.beta, b.beta * b.sigma_o + 0.25 * b.sigma_x * wo])
        .expect("finite bounds");
    let rho_a = spectral_radius(&a_delta).expect("2x2");
    let (r1, r2) = jury_margins(&b, uo);
    DeltaIss {
        bounds: b,
        a_delta,
        b_delta,
        rho_a,
        jury_margin_left: r1,
        jury_margin_right: r2,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    #[serde(flatten)]
    pub iss: DeltaIss,
    pub p_s: Mat,
    pub rho_s: f64,
    pub c_sl: f64,
    pub c_su: f64,
    pub c_s: Vec<f64>,
}

pub fn incremental_lyapunov(w: &LstmWeights, q_s: &Mat) -> Result<StabilityCertificate> {
    let iss = delta_iss_check(w);
    if !iss.certified() {
        return Err(Error::Unstable { rho: iss.rho_a });
    }
    let p_s = solve_discrete_lyapunov(&iss.a_delta, q_s)?;
    let (pmin, pmax) = eig_extrema_spd(&p_s)?;
    let (qmin, _) = eig_extrema_spd(q_s)?;
    let rho_s = (1.0 - qmin / pmax).max(0.0).sqrt();
    let c_s = (0..w.p).map(|j| norm2(w.w_y.row(j)) / pmin.sqrt()).collect();
    Ok(StabilityCertificate {
        iss,
        p_s,
        rho_s,
        c_sl: pmin.sqrt(),
        c_su: pmax.sqrt(),
        c_s,
    })
}

/// `‖[‖c_a − c_b‖; ‖h_a − h_b‖]‖_{P_s}`
pub fn v_s(cert: &StabilityCertificate, xa: &LstmState, xb: &LstmState) -> f64 {
    let v = [norm2(&sub_vec(&xa.c, &xb.c)), norm2(&sub_vec(&xa.h, &xb.h))];
    cert.p_s.quad_form(&v).max(0.0).sqrt()
}

/// Is `x` inside `C × H` (with a small slack)?
pub fn in_invariant_set(b: &GateBounds, x: &LstmState, slack: f64) -> bool {
    x.c.iter().all(|c| c.abs() <= b.c_radius + slack) && x.h.iter().all(|h| h.abs() <= 1.0 + slack)
}

/// Weighted `‖·‖_P` of an arbitrary vector.
pub fn p_norm(p: &Mat, v: &[f64]) -> f64 {
    dot(v, &p.matvec(v)).max(0.0).sqrt()
}

/// Adjoint of one step with respect to the state and input: given the
/// sensitivities `(a_c, a_h)` of a scalar to `(c⁺, h⁺)`, returns its
/// sensitivities to `(c, h, u)`.
pub fn step_vjp(
    w: &LstmWeights,
    x: &LstmState,
    u: &[f64],
    a_c: &[f64],
    a_h: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = w.n;
    let zf = preactivation(w, 0, &x.h, u);
    let zi = preactivation(w, 1, &x.h, u);
    let zc = preactivation(w, 2, &x.h, u);
    let zo = preactivation(w, 3, &x.h, u);
    let mut dz = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut gc = vec![0.0; n];
    for j in 0..n {
        let (f, i, g, o) = (sigmoid(zf[j]), sigmoid(zi[j]), zc[j].tanh(), sigmoid(zo[j]));
        let cp = f * x.c[j] + i * g;
        let t = cp.tanh();
        let ac = a_c[j] + a_h[j] * o * (1.0 - t * t);
        dz[3][j] = a_h[j] * t * o * (1.0 - o);
        dz[0][j] = ac * x.c[j] * f * (1.0 - f);
        dz[1][j] = ac * g * i * (1.0 - i);
        dz[2][j] = ac * i * (1.0 - g * g);
        gc[j] = ac * f;
    }
    let mut gh = vec![0.0; n];
    let mut gu = vec![0.0; w.m];
    for (g, d) in dz.iter().enumerate() {
        for (a, b) in gh.iter_mut().zip(w.u(g).matvec_t(d)) {
            *a += b;
        }
        for (a, b) in gu.iter_mut().zip(w.w(g).matvec_t(d)) {
            *a += b;
        }
    }
    (gc, gh, gu)
}

/// Iterate `x ← f(x, u)` until the step size falls below `tol` (2-norm on the
/// stacked state) or `max_steps` is reached. Returns the final state and the
/// number of steps taken.
pub fn attractor(
    w: &LstmWeights,
    u: &[f64],
    x0: &LstmState,
    max_steps: usize,
    tol: f64,
) -> Result<(LstmState, usize)> {
    let mut x = x0.clone();
    for k in 0..max_steps {
        let nx = step(w, &x, u)?;
        let d = norm2(&sub_vec(&nx.stacked(), &x.stacked()));
        x = nx;
        if d < tol {
            return Ok((x, k + 1));
        }
    }
    Ok((x, max_steps))
}
