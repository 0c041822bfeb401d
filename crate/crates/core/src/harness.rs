//! Closed-loop engine: scenario scripting, the observer / reference / MPC
//! loop against either the pH plant or the augmented model, invariant
//! checks, and CSV / JSON reporting.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{self, incremental_lyapunov, LstmState, LstmWeights, StabilityCertificate};
use crate::mpc::{
    admissible_band, build_schedule, compute_pf, eo_step, terminal_alpha, Controller, Fhocp, MpcConfig,
    SolveStatus, TighteningSchedule,
};
use crate::numerics::{eig_extrema_spd, Mat};
use crate::observer::{
    augmented_output, augmented_step, observer_step, select_gains, v_o, AugmentedState, ObserverConfig,
    ObserverSpec,
};
use crate::plant::{
    self, measure_ph, plant_step, saturate_input, Channel, Normalizer, PhParams, PlantState, Q2_NOMINAL,
    U_PHI_MAX, U_PHI_MIN, Y_PHI_MAX, Y_PHI_MIN,
};
use crate::refcalc::{estimate_k_bar, solve_reference, InputBox, KBarEstimate, ReferencePair};

/// Read a JSON file, reporting the path of the offending field on failure.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    parse_json(&text).map_err(|e| match e {
        Error::Config { path: p, msg } => Error::Config {
            path: format!("{}:{p}", path.display()),
            msg,
        },
        e => e,
    })
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        msg: e.inner().to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub epochs: usize,
    pub fit_test: f64,
    pub fit_val: f64,
}

/// Trained weights plus everything needed to use them on the plant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub weights: LstmWeights,
    pub normalizer: Normalizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observer: Option<ObserverSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ModelMeta>,
}

impl ModelFile {
    pub fn load(path: &Path) -> Result<Self> {
        let m: ModelFile = read_json(path)?;
        m.weights.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Plant is the augmented LSTM model.
    Nominal,
    /// Plant is the pH ODE.
    Physical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetpointEvent {
    pub time: f64,
    pub target_ph: f64,
    /// pH per second; capped by the scenario's per-step limit.
    #[serde(default)]
    pub ramp_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEvent {
    pub time: f64,
    pub q2: f64,
}

/// Scripted disturbance increments for nominal mode,
/// `w_k = fraction · w_max · decayᵏ · sin(2πk / period)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NominalDisturbance {
    pub fraction: f64,
    pub decay: f64,
    pub period: f64,
    /// Scale of the random initial observer error, as a fraction of ê_{o,0}
    /// measured in V_o.
    pub initial_error: f64,
}

impl Default for NominalDisturbance {
    fn default() -> Self {
        NominalDisturbance {
            fraction: 0.9,
            decay: 0.995,
            period: 60.0,
            initial_error: 0.0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub duration: f64,
    pub ts: f64,
    pub mode: Mode,
    pub seed: u64,
    pub initial_ph: f64,
    pub setpoints: Vec<SetpointEvent>,
    pub disturbances: Vec<DisturbanceEvent>,
    /// Largest set-point change per step, normalized units.
    pub dy0_max: f64,
    pub y_bounds: (f64, f64),
    pub q_s: f64,
    pub controller: MpcConfig,
    /// `None` uses the observer stored with the model (or the defaults).
    pub observer: Option<ObserverConfig>,
    pub nominal: NominalDisturbance,
    pub plant: PhParams,
    /// Grid density for the K̄ estimate; 0 skips it.
    pub k_bar_density: usize,
    /// Length of the window at the end of each constant segment used for the
    /// tracking summary.
    pub settle_window: f64,
    /// Shortest constant segment that gets a tracking summary.
    pub min_segment: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            duration: 10_000.0,
            ts: plant::TS,
            mode: Mode::Physical,
            seed: 0,
            initial_ph: 7.0,
            setpoints: Vec::new(),
            disturbances: Vec::new(),
            dy0_max: 0.005,
            y_bounds: (Y_PHI_MIN, Y_PHI_MAX),
            q_s: 1000.0,
            controller: MpcConfig::default(),
            observer: None,
            nominal: NominalDisturbance::default(),
            plant: PhParams::default(),
            k_bar_density: 0,
            settle_window: 200.0,
            min_segment: 800.0,
        }
    }
}

impl Scenario {
    /// The benchmark run: ramped set-points over the first 7000 s, then a
    /// constant 7 with steps of q₂.
    pub fn benchmark() -> Self {
        let sp = |time: f64, target_ph: f64| SetpointEvent {
            time,
            target_ph,
            ramp_rate: None,
        };
        Scenario {
            setpoints: vec![sp(0.0, 7.0), sp(1000.0, 7.8), sp(3000.0, 6.8), sp(5200.0, 7.0)],
            disturbances: vec![
                DisturbanceEvent { time: 7000.0, q2: 0.45 },
                DisturbanceEvent { time: 8000.0, q2: 0.6 },
                DisturbanceEvent { time: 9000.0, q2: 0.7 },
            ],
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Scenario = read_json(path)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: &str| {
            Err(Error::Config {
                path: path.into(),
                msg: msg.into(),
            })
        };
        if !(self.duration >= 0.0) {
            return bad("duration", "must be >= 0");
        }
        if !(self.ts > 0.0) {
            return bad("ts", "must be > 0");
        }
        if !(self.dy0_max > 0.0) {
            return bad("dy0_max", "must be > 0");
        }
        if !(self.y_bounds.1 > self.y_bounds.0) {
            return bad("y_bounds", "upper bound must exceed lower bound");
        }
        if self.controller.horizon == 0 {
            return bad("controller.horizon", "must be >= 1");
        }
        for (i, e) in self.setpoints.iter().enumerate() {
            if e.ramp_rate.is_some_and(|r| !(r > 0.0)) {
                return bad(&format!("setpoints[{i}].ramp_rate"), "must be > 0");
            }
        }
        for (i, w) in self.setpoints.windows(2).enumerate() {
            if w[1].time < w[0].time {
                return bad(&format!("setpoints[{}].time", i + 1), "events must be sorted by time");
            }
        }
        for (i, w) in self.disturbances.windows(2).enumerate() {
            if w[1].time < w[0].time {
                return bad(&format!("disturbances[{}].time", i + 1), "events must be sorted by time");
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.ts).round() as usize
    }

    fn target_at(&self, t: f64) -> Option<&SetpointEvent> {
        self.setpoints.iter().rev().find(|e| e.time <= t)
    }

    fn q2_at(&self, t: f64) -> f64 {
        self.disturbances
            .iter()
            .rev()
            .find(|e| e.time <= t)
            .map(|e| e.q2)
            .unwrap_or(Q2_NOMINAL)
    }
}

/// Everything derived offline from the model: certificates, observer,
/// tightening, terminal weight, and the constraint sets in normalized units.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlDesign {
    pub certificate: StabilityCertificate,
    pub observer: ObserverSpec,
    pub schedule: TighteningSchedule,
    pub p_f: Mat,
    pub q: f64,
    pub ubox: InputBox,
    pub y_lb: Vec<f64>,
    pub y_ub: Vec<f64>,
}

pub fn design(model: &ModelFile, sc: &Scenario) -> Result<ControlDesign> {
    let w = &model.weights;
    let nrm = &model.normalizer;
    let certificate = incremental_lyapunov(w, &Mat::identity(2).scale(sc.q_s))?;
    let observer = match (&sc.observer, &model.observer) {
        (Some(cfg), _) => select_gains(w, cfg)?,
        (None, Some(spec)) => spec.clone(),
        (None, None) => select_gains(w, &ObserverConfig::default())?,
    };
    let schedule = build_schedule(&certificate, &observer, sc.controller.horizon);
    let q = sc.controller.q(w.n)?.into_iter().fold(0.0, f64::max);
    let p_f = compute_pf(&certificate.iss.a_delta, q)?;
    let ubox = InputBox {
        lo: vec![nrm.normalize(U_PHI_MIN, Channel::Input); w.m],
        hi: vec![nrm.normalize(U_PHI_MAX, Channel::Input); w.m],
    };
    Ok(ControlDesign {
        certificate,
        observer,
        schedule,
        p_f,
        q,
        ubox,
        y_lb: vec![nrm.normalize(sc.y_bounds.0, Channel::Output); w.p],
        y_ub: vec![nrm.normalize(sc.y_bounds.1, Channel::Output); w.p],
    })
}

impl ControlDesign {
    /// Admissible set-point interval in pH for a given ê_o (single output).
    pub fn band_phys(&self, nrm: &Normalizer, e_o: f64) -> (f64, f64) {
        let e_tilde = e_o.max(self.schedule.e_inf());
        let b = admissible_band(&self.schedule, &self.y_lb, &self.y_ub, self.observer.d_max, e_tilde);
        (
            nrm.denormalize(b[0].0, Channel::Output),
            nrm.denormalize(b[0].1, Channel::Output),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assumption5Violation {
    pub step: usize,
    pub output: usize,
    pub side: String,
    pub margin: f64,
}

/// Check every set-point of a trace against the admissible band for the
/// matching ê_o.
pub fn check_assumption5(
    y0_trace: &[Vec<f64>],
    e_o_trace: &[f64],
    sched: &TighteningSchedule,
    y_lb: &[f64],
    y_ub: &[f64],
    d_max: f64,
) -> Vec<Assumption5Violation> {
    let mut out = Vec::new();
    for (k, (y0, e)) in y0_trace.iter().zip(e_o_trace).enumerate() {
        let band = admissible_band(sched, y_lb, y_ub, d_max, e.max(sched.e_inf()));
        for (j, (lo, hi)) in band.iter().enumerate() {
            if !(y0[j] < *hi) {
                out.push(Assumption5Violation {
                    step: k,
                    output: j,
                    side: "upper".into(),
                    margin: hi - y0[j],
                });
            }
            if !(y0[j] > *lo) {
                out.push(Assumption5Violation {
                    step: k,
                    output: j,
                    side: "lower".into(),
                    margin: y0[j] - lo,
                });
            }
        }
    }
    out
}

/// One CSV line; column order is part of the file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: f64,
    pub y0_phys: f64,
    pub y_phys: f64,
    pub u_phys: f64,
    /// q₂ in physical mode; the true disturbance (in pH) in nominal mode.
    pub d_phi: f64,
    /// Disturbance estimate in pH.
    pub d_hat: f64,
    pub e_o: f64,
    #[serde(rename = "V_o")]
    pub v_o: Option<f64>,
    pub alpha_k: f64,
    pub cost: f64,
    pub status: SolveStatus,
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub start: f64,
    pub end: f64,
    pub y0_phys: f64,
    pub q2: f64,
    /// Largest |y − y⁰| over the final window.
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub optimal: usize,
    pub candidate_fallback: usize,
    pub mean_iterations: f64,
    pub max_iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateViolation {
    pub step: usize,
    pub violation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub steps: usize,
    pub constraint_violations: usize,
    pub feasibility_losses: usize,
    pub candidate_checks: usize,
    pub candidate_violations: Vec<CandidateViolation>,
    pub assumption5_violations: Vec<Assumption5Violation>,
    pub segments: Vec<SegmentReport>,
    pub solver: SolverStats,
    pub min_y_phys: f64,
    pub max_y_phys: f64,
    pub band_k0: (f64, f64),
    pub band_limit: (f64, f64),
    /// Largest V_o / ê_o seen (nominal mode).
    pub max_vo_ratio: Option<f64>,
    pub k_bar: Option<KBarEstimate>,
    pub rho_s: f64,
    pub rho_o: f64,
    pub e_inf: f64,
}

pub struct RunOutput {
    pub report: RunReport,
    pub trace: Vec<TraceRow>,
}

/// Snapshot of ψ for invariant-breach reports.
#[derive(Serialize)]
struct Psi<'a> {
    plant: Option<&'a PlantState>,
    model: Option<&'a AugmentedState>,
    chi_hat: &'a AugmentedState,
    e_o: f64,
    reference: Option<&'a ReferencePair>,
}

enum Truth {
    Physical(PlantState),
    Nominal(AugmentedState),
}

fn breach(step: usize, what: String, psi: &Psi) -> Error {
    Error::Invariant {
        step,
        what,
        snapshot: serde_json::to_string(psi).unwrap_or_default(),
    }
}

/// Run the closed loop of the scenario.
pub fn run_scenario(model: &ModelFile, sc: &Scenario) -> Result<RunOutput> {
    sc.validate()?;
    let dsg = design(model, sc)?;
    run_with_design(model, sc, &dsg)
}

pub fn run_with_design(model: &ModelFile, sc: &Scenario, dsg: &ControlDesign) -> Result<RunOutput> {
    let w = &model.weights;
    let nrm = &model.normalizer;
    let spec = &dsg.observer;
    let sched = &dsg.schedule;
    let d_max = spec.d_max;
    let scfg = &sc.controller.solver;
    if w.m != 1 || w.p != 1 {
        return Err(Error::Argument("the closed loop drives a single-input single-output plant".into()));
    }
    let steps = sc.steps();
    let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);

    // initial estimate: model equilibrium at the nominal output, d̂ = 0
    let y_init = nrm.normalize(sc.initial_ph, Channel::Output);
    let r0 = solve_reference(w, &[y_init], &[0.0], None, &dsg.ubox)?;
    let mut chi_hat = AugmentedState::new(r0.x_bar.clone(), vec![0.0]);
    let mut e_o = sc.controller.e_o0;
    let mut truth = match sc.mode {
        Mode::Physical => Truth::Physical(sc.plant.nominal_state()),
        Mode::Nominal => {
            let mut chi = chi_hat.clone();
            if sc.nominal.initial_error > 0.0 {
                let b = lstm::gate_bounds(w);
                let mut dx = AugmentedState::new(
                    LstmState {
                        c: (0..w.n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        h: (0..w.n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    },
                    vec![rng.random_range(-1.0..1.0)],
                );
                // scale the error so that V_o(0) = initial_error · ê_{o,0}
                let v1 = v_o(spec, &dx, &AugmentedState::zeros(w.n, 1));
                let s = sc.nominal.initial_error * e_o / v1;
                for (a, b) in chi.x.c.iter_mut().zip(dx.x.c.iter_mut()) {
                    *a += s * *b;
                }
                for (a, b) in chi.x.h.iter_mut().zip(dx.x.h.iter_mut()) {
                    *a = (*a + s * *b).clamp(-1.0, 1.0);
                }
                chi.d[0] = (s * dx.d[0]).clamp(-d_max, d_max);
                for c in chi.x.c.iter_mut() {
                    *c = c.clamp(-b.c_radius, b.c_radius);
                }
            }
            Truth::Nominal(chi)
        }
    };

    let mut y0 = y_init;
    let mut reference: Option<ReferencePair> = None;
    let mut ctrl = Controller::default();
    let mut trace = Vec::with_capacity(steps);
    let mut stats = SolverStats::default();
    let mut iter_sum = 0usize;
    let mut cand_checks = 0;
    let mut cand_viol = Vec::new();
    let mut y0_trace = Vec::with_capacity(steps);
    let mut e_trace = Vec::with_capacity(steps);
    let mut max_ratio: Option<f64> = None;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    let (ylb, yub) = (dsg.y_lb[0], dsg.y_ub[0]);

    for k in 0..steps {
        let t = k as f64 * sc.ts;
        // set-point ramp
        if let Some(ev) = sc.target_at(t) {
            let target = nrm.normalize(ev.target_ph, Channel::Output);
            let lim = ev
                .ramp_rate
                .map(|r| (r * sc.ts / nrm.y_scale()).min(sc.dy0_max))
                .unwrap_or(sc.dy0_max);
            if k > 0 || (target - y0).abs() <= lim {
                y0 += (target - y0).clamp(-lim, lim);
            }
        }
        let q2 = sc.q2_at(t);

        // measurement
        let (y, vo) = match &truth {
            Truth::Physical(x) => (nrm.normalize(measure_ph(&sc.plant, x)?, Channel::Output), None),
            Truth::Nominal(chi) => (augmented_output(w, chi)?[0], Some(v_o(spec, &chi_hat, chi))),
        };
        let psi = |reference: Option<&ReferencePair>, chi_hat: &AugmentedState| -> String {
            let (pl, md) = match &truth {
                Truth::Physical(x) => (Some(x), None),
                Truth::Nominal(c) => (None, Some(c)),
            };
            serde_json::to_string(&Psi {
                plant: pl,
                model: md,
                chi_hat,
                e_o,
                reference,
            })
            .unwrap_or_default()
        };
        let y_phys = nrm.denormalize(y, Channel::Output);
        y_min = y_min.min(y_phys);
        y_max = y_max.max(y_phys);
        if !(y >= ylb && y <= yub) {
            return Err(Error::Invariant {
                step: k,
                what: format!("output {y_phys:.4} pH outside [{}, {}]", sc.y_bounds.0, sc.y_bounds.1),
                snapshot: psi(reference.as_ref(), &chi_hat),
            });
        }
        if let Some(v) = vo {
            let r = if e_o > 0.0 { v / e_o } else { f64::INFINITY };
            max_ratio = Some(max_ratio.map_or(r, |m: f64| m.max(r)));
            if v > e_o + 1e-9 {
                return Err(Error::Invariant {
                    step: k,
                    what: format!("V_o = {v:.6} exceeds ê_o = {e_o:.6}"),
                    snapshot: psi(reference.as_ref(), &chi_hat),
                });
            }
        }
        y0_trace.push(vec![y0]);
        e_trace.push(e_o);

        let r = solve_reference(w, &[y0], &chi_hat.d, reference.as_ref(), &dsg.ubox)?;
        let (alpha, _) = terminal_alpha(sched, &dsg.p_f, &w.w_y, &[y0], &dsg.y_lb, &dsg.y_ub, d_max, e_o)?;
        let prob = Fhocp::new(
            w,
            &sc.controller,
            &dsg.p_f,
            sched,
            &chi_hat.x,
            e_o,
            &r,
            &dsg.ubox,
            &dsg.y_lb,
            &dsg.y_ub,
            d_max,
            alpha,
        )?;
        if let Some(c) = ctrl.candidate(&r.u_bar) {
            cand_checks += 1;
            let v = prob.evaluate(&c).max_violation();
            if v > scfg.constraint_tol {
                cand_viol.push(CandidateViolation { step: k, violation: v });
            }
        }
        let (u, sol) = match ctrl.step(&prob, scfg) {
            Ok(s) => s,
            Err(Error::FeasibilityLoss(m)) => {
                return Err(breach(
                    k,
                    format!("FHOCP infeasible: {m}"),
                    &Psi {
                        plant: None,
                        model: None,
                        chi_hat: &chi_hat,
                        e_o,
                        reference: Some(&r),
                    },
                ))
            }
            Err(e) => return Err(e),
        };
        match sol.status {
            SolveStatus::Optimal => stats.optimal += 1,
            SolveStatus::CandidateFallback => stats.candidate_fallback += 1,
        }
        iter_sum += sol.iterations;
        stats.max_iterations = stats.max_iterations.max(sol.iterations);

        let u_phys = saturate_input(nrm.denormalize(u[0], Channel::Input));
        let u_applied = nrm.normalize(u_phys, Channel::Input);
        let d_phi = match &truth {
            Truth::Physical(_) => q2,
            Truth::Nominal(chi) => chi.d[0] * nrm.y_scale(),
        };
        trace.push(TraceRow {
            t,
            y0_phys: nrm.denormalize(y0, Channel::Output),
            y_phys,
            u_phys,
            d_phi,
            d_hat: chi_hat.d[0] * nrm.y_scale(),
            e_o,
            v_o: vo,
            alpha_k: alpha,
            cost: sol.cost,
            status: sol.status,
        });

        chi_hat = observer_step(w, spec, &chi_hat, &[u_applied], &[y])?;
        truth = match truth {
            Truth::Physical(x) => Truth::Physical(plant_step(&sc.plant, x, u_phys, q2, sc.ts)?),
            Truth::Nominal(chi) => {
                let nd = &sc.nominal;
                let amp = nd.fraction * spec.w_max * nd.decay.powi(k as i32);
                let mut wk = amp * (2.0 * std::f64::consts::PI * k as f64 / nd.period).sin();
                // keep the true disturbance inside D
                wk = (chi.d[0] + wk).clamp(-d_max, d_max) - chi.d[0];
                Truth::Nominal(augmented_step(w, &chi, &[u_applied], &[wk], d_max)?)
            }
        };
        e_o = eo_step(e_o, sched.rho_o, sched.w_bar);
        reference = Some(r);
    }

    stats.mean_iterations = if steps > 0 { iter_sum as f64 / steps as f64 } else { 0.0 };
    let a5 = check_assumption5(&y0_trace, &e_trace, sched, &dsg.y_lb, &dsg.y_ub, d_max);
    let segments = segment_summary(&trace, sc);
    let k_bar = if sc.k_bar_density > 0 {
        let b = admissible_band(sched, &dsg.y_lb, &dsg.y_ub, d_max, sc.controller.e_o0.max(sched.e_inf()));
        Some(estimate_k_bar(w, b[0], (-d_max, d_max), sc.k_bar_density, &dsg.ubox)?)
    } else {
        None
    };
    let report = RunReport {
        mode: sc.mode,
        steps,
        constraint_violations: 0,
        feasibility_losses: 0,
        candidate_checks: cand_checks,
        candidate_violations: cand_viol,
        assumption5_violations: a5,
        segments,
        solver: stats,
        min_y_phys: y_min,
        max_y_phys: y_max,
        band_k0: dsg.band_phys(nrm, sc.controller.e_o0),
        band_limit: dsg.band_phys(nrm, 0.0),
        max_vo_ratio: max_ratio,
        k_bar,
        rho_s: dsg.certificate.rho_s,
        rho_o: spec.constants.rho_o,
        e_inf: sched.e_inf(),
    };
    Ok(RunOutput { report, trace })
}

/// Maximal runs of constant `(y⁰, q₂)` long enough to judge settling.
fn segment_summary(trace: &[TraceRow], sc: &Scenario) -> Vec<SegmentReport> {
    let mut out = Vec::new();
    let mut start = 0;
    for k in 1..=trace.len() {
        let split = k == trace.len()
            || trace[k].y0_phys != trace[start].y0_phys
            || sc.q2_at(trace[k].t) != sc.q2_at(trace[start].t);
        if !split {
            continue;
        }
        let t0 = trace[start].t;
        let t1 = trace[k - 1].t + sc.ts;
        if t1 - t0 >= sc.min_segment {
            let from = t1 - sc.settle_window;
            let err = trace[start..k]
                .iter()
                .filter(|r| r.t >= from)
                .map(|r| (r.y_phys - r.y0_phys).abs())
                .fold(0.0, f64::max);
            out.push(SegmentReport {
                start: t0,
                end: t1,
                y0_phys: trace[start].y0_phys,
                q2: sc.q2_at(t0),
                max_abs_error: err,
            });
        }
        start = k;
    }
    out
}

/// The `certify` document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CertifyReport {
    pub certificate: StabilityCertificate,
    pub observer: ObserverSpec,
    pub schedule: TighteningSchedule,
    pub p_f: Mat,
    pub k_bar: Option<KBarEstimate>,
    pub band_k0: (f64, f64),
    pub band_limit: (f64, f64),
    pub lambda_min_p_f: f64,
}

pub fn certify(model: &ModelFile, sc: &Scenario) -> Result<CertifyReport> {
    let dsg = design(model, sc)?;
    let k_bar = if sc.k_bar_density > 0 {
        let s = &dsg.schedule;
        let b = admissible_band(s, &dsg.y_lb, &dsg.y_ub, dsg.observer.d_max, sc.controller.e_o0.max(s.e_inf()));
        let d = dsg.observer.d_max;
        Some(estimate_k_bar(&model.weights, b[0], (-d, d), sc.k_bar_density, &dsg.ubox)?)
    } else {
        None
    };
    let (lmin, _) = eig_extrema_spd(&dsg.p_f)?;
    Ok(CertifyReport {
        band_k0: dsg.band_phys(&model.normalizer, sc.controller.e_o0),
        band_limit: dsg.band_phys(&model.normalizer, 0.0),
        certificate: dsg.certificate,
        observer: dsg.observer,
        schedule: dsg.schedule,
        p_f: dsg.p_f,
        k_bar,
        lambda_min_p_f: lmin,
    })
}
