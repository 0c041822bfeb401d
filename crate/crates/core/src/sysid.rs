//! Identification: excitation signals, datasets, BPTT training with the
//! stability-penalized loss, and the FIT metric.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lstm::{delta_iss_check, sigmoid, LstmWeights};
use crate::numerics::{induced_two_norm, leading_singular_pair, Mat};
use crate::plant::{self, Channel, Normalizer, PhParams};

/// Piecewise-constant random levels in `[lo, hi]`, each held for a uniform
/// number of steps in `[hold_min, hold_max]`; the last segment is truncated.
pub fn generate_excitation(
    seed: u64,
    levels: (f64, f64),
    hold: (usize, usize),
    total_steps: usize,
) -> Result<Vec<f64>> {
    let (lo, hi) = levels;
    let (hmin, hmax) = hold;
    if !(hi >= lo) || hmin == 0 || hmax < hmin {
        return Err(Error::Argument("excitation needs lo <= hi and 1 <= hold_min <= hold_max".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(total_steps);
    while out.len() < total_steps {
        let level = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let len = rng.random_range(hmin..=hmax);
        for _ in 0..len.min(total_steps - out.len()) {
            out.push(level);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One recorded experiment in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub u_raw: Vec<f64>,
    pub y_raw: Vec<f64>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub normalizer: Normalizer,
    pub ts: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    pub n_sequences: usize,
    pub steps: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub hold_min: usize,
    pub hold_max: usize,
    pub q2: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 1,
            n_sequences: 15,
            steps: 1500,
            n_train: 10,
            n_val: 3,
            hold_min: 10,
            hold_max: 100,
            q2: plant::Q2_NOMINAL,
        }
    }
}

/// A normalized (u, y) pair of traces, ready for training.
#[derive(Clone, Debug)]
pub struct NormSeq {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

impl Dataset {
    /// Excite the plant from its nominal steady state and record pH each sample.
    pub fn generate(p: &PhParams, cfg: &DataConfig) -> Result<Dataset> {
        if cfg.n_train == 0 || cfg.n_train + cfg.n_val > cfg.n_sequences {
            return Err(Error::Argument("split sizes do not fit the sequence count".into()));
        }
        let mut sequences = Vec::with_capacity(cfg.n_sequences);
        for s in 0..cfg.n_sequences {
            let u = generate_excitation(
                cfg.seed.wrapping_mul(1000).wrapping_add(s as u64),
                (plant::U_PHI_MIN, plant::U_PHI_MAX),
                (cfg.hold_min, cfg.hold_max),
                cfg.steps,
            )?;
            let mut x = p.nominal_state();
            let mut y = Vec::with_capacity(cfg.steps);
            for &uk in &u {
                y.push(plant::measure_ph(p, &x)?);
                x = plant::plant_step(p, x, uk, cfg.q2, plant::TS)?;
            }
            let split = if s < cfg.n_train {
                Split::Train
            } else if s < cfg.n_train + cfg.n_val {
                Split::Val
            } else {
                Split::Test
            };
            sequences.push(Sequence { u_raw: u, y_raw: y, split });
        }
        let normalizer = Self::fit_normalizer(&sequences)?;
        Ok(Dataset {
            sequences,
            normalizer,
            ts: plant::TS,
        })
    }

    fn fit_normalizer(seqs: &[Sequence]) -> Result<Normalizer> {
        let train = seqs.iter().filter(|s| s.split == Split::Train);
        let (mut ulo, mut uhi, mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for s in train {
            for &u in &s.u_raw {
                ulo = ulo.min(u);
                uhi = uhi.max(u);
            }
            for &y in &s.y_raw {
                ylo = ylo.min(y);
                yhi = yhi.max(y);
            }
        }
        Normalizer::new(ulo, uhi, ylo, yhi)
    }

    pub fn normalized(&self, split: Split) -> Vec<NormSeq> {
        self.sequences
            .iter()
            .filter(|s| s.split == split)
            .map(|s| NormSeq {
                u: s.u_raw.iter().map(|&u| self.normalizer.normalize(u, Channel::Input)).collect(),
                y: s.y_raw.iter().map(|&y| self.normalizer.normalize(y, Channel::Output)).collect(),
            })
            .collect()
    }

    /// Write `seq_XX.csv` files and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (i, s) in self.sequences.iter().enumerate() {
            let file = format!("seq_{i:02}.csv");
            let mut wr = csv::Writer::from_path(dir.join(&file))?;
            wr.write_record(["t", "u_raw", "y_raw"])?;
            for k in 0..s.u_raw.len() {
                wr.write_record(&[
                    format!("{}", k as f64 * self.ts),
                    format!("{:?}", s.u_raw[k]),
                    format!("{:?}", s.y_raw[k]),
                ])?;
            }
            wr.flush()?;
            entries.push(ManifestEntry { file, split: s.split });
        }
        let manifest = Manifest {
            ts: self.ts,
            normalizer: self.normalizer,
            sequences: entries,
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut sequences = Vec::new();
        for e in &manifest.sequences {
            let mut rd = csv::Reader::from_path(dir.join(&e.file))?;
            let (mut u, mut y) = (Vec::new(), Vec::new());
            for rec in rd.deserialize() {
                let (_t, ur, yr): (f64, f64, f64) = rec?;
                u.push(ur);
                y.push(yr);
            }
            sequences.push(Sequence {
                u_raw: u,
                y_raw: y,
                split: e.split,
            });
        }
        Ok(Dataset {
            sequences,
            normalizer: manifest.normalizer,
            ts: manifest.ts,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    split: Split,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    ts: f64,
    normalizer: Normalizer,
    sequences: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub washout: usize,
    pub seed: u64,
    pub hidden: usize,
    pub init_scale: f64,
    /// Hard cap on the certification extension, as a multiple of `epochs`.
    pub max_epoch_factor: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 1000,
            lambda1: 0.03,
            lambda2: 0.02,
            washout: 50,
            seed: 0,
            hidden: 5,
            init_scale: 0.1,
            max_epoch_factor: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Argument("learning_rate must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Argument("lambda1, lambda2 must be nonnegative".into()));
        }
        if self.hidden == 0 || self.max_epoch_factor == 0 {
            return Err(Error::Argument("hidden and max_epoch_factor must be positive".into()));
        }
        Ok(())
    }
}

/// Uniform init in `(−scale, scale)`.
pub fn init_weights(n: usize, m: usize, p: usize, u_max: f64, scale: f64, seed: u64) -> LstmWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = LstmWeights::zeros(n, m, p, u_max);
    for t in w.params_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    w
}

/// Penalty on the Jury margins and its gradient with respect to the weights.
fn penalty(w: &LstmWeights, lambda1: f64, lambda2: f64, grad: Option<&mut LstmWeights>) -> (f64, f64, f64) {
    let iss = delta_iss_check(w);
    let (r1, r2) = (iss.jury_margin_left, iss.jury_margin_right);
    let term = |r: f64| if r >= 0.0 { lambda1 * r } else { lambda2 * r };
    let value = term(r1) + term(r2);
    let Some(grad) = grad else {
        return (value, r1, r2);
    };
    let slope = |r: f64| if r >= 0.0 { lambda1 } else { lambda2 };
    let (g_r1, g_r2) = (slope(r1), slope(r2));

    let b = iss.bounds;
    let (sf, si, sc, so, s, sx) = (b.sigma_f, b.sigma_i, b.sigma_c, b.sigma_o, b.c_radius, b.sigma_x);
    let nrm = |m: &Mat| induced_two_norm(m);
    let (n_uf, n_ui, n_uc, n_uo) = (nrm(&w.u_f), nrm(&w.u_i), nrm(&w.u_c), nrm(&w.u_o));
    let alpha = b.alpha;
    let q = 0.25 * sx * n_uo;

    // r1 = −1 + sf + α so + q − sf q ; r2 = sf q − 1
    let mut g_sf = g_r1 * (1.0 - q) + g_r2 * q;
    let g_alpha = g_r1 * so;
    let g_so = g_r1 * alpha;
    let g_q = g_r1 * (1.0 - sf) + g_r2 * sf;
    let g_sx = g_q * 0.25 * n_uo;
    let g_nuo = g_q * 0.25 * sx;
    let mut g_s = g_sx * (1.0 - sx * sx);
    // α = ¼‖U_f‖ s + si ‖U_c‖ + ¼‖U_i‖ sc
    let g_nuf = g_alpha * 0.25 * s;
    g_s += g_alpha * 0.25 * n_uf;
    let mut g_si = g_alpha * n_uc;
    let g_nuc = g_alpha * si;
    let g_nui = g_alpha * 0.25 * sc;
    let mut g_sc = g_alpha * 0.25 * n_ui;
    // s = si sc / (1 − sf)
    g_si += g_s * sc / (1.0 - sf);
    g_sc += g_s * si / (1.0 - sf);
    g_sf += g_s * si * sc / ((1.0 - sf) * (1.0 - sf));

    let g_a = [
        g_sf * sf * (1.0 - sf),
        g_si * si * (1.0 - si),
        g_sc * (1.0 - sc * sc),
        g_so * so * (1.0 - so),
    ];
    // Subgradient of ‖[W u_max, U, b]‖_∞: signs on the maximizing row.
    for g in 0..4 {
        let n = w.n;
        let row_sum = |j: usize| {
            w.w(g).row(j).iter().map(|v| v.abs() * w.u_max).sum::<f64>()
                + w.u(g).row(j).iter().map(|v| v.abs()).sum::<f64>()
                + w.b(g)[j].abs()
        };
        let jstar = (0..n).fold(0, |best, j| if row_sum(j) > row_sum(best) { j } else { best });
        let ga = g_a[g];
        let wrow: Vec<f64> = w.w(g).row(jstar).to_vec();
        let urow: Vec<f64> = w.u(g).row(jstar).to_vec();
        let bj = w.b(g)[jstar];
        let (gw, gu, gb) = grad_gate_mut(grad, g);
        for (k, v) in wrow.iter().enumerate() {
            gw[(jstar, k)] += ga * w.u_max * v.signum() * (*v != 0.0) as u8 as f64;
        }
        for (k, v) in urow.iter().enumerate() {
            gu[(jstar, k)] += ga * v.signum() * (*v != 0.0) as u8 as f64;
        }
        gb[jstar] += ga * bj.signum() * (bj != 0.0) as u8 as f64;
    }
    // ∂‖M‖/∂M = u₁ v₁ᵀ
    for (mat_grad, m, coef) in [
        (&mut grad.u_f, &w.u_f, g_nuf),
        (&mut grad.u_i, &w.u_i, g_nui),
        (&mut grad.u_c, &w.u_c, g_nuc),
        (&mut grad.u_o, &w.u_o, g_nuo),
    ] {
        if coef == 0.0 {
            continue;
        }
        let (sigma, u1, v1) = leading_singular_pair(m);
        if sigma == 0.0 {
            continue;
        }
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                mat_grad[(r, c)] += coef * u1[r] * v1[c];
            }
        }
    }
    (value, r1, r2)
}

fn grad_gate_mut(g: &mut LstmWeights, gate: usize) -> (&mut Mat, &mut Mat, &mut Vec<f64>) {
    match gate {
        0 => (&mut g.w_f, &mut g.u_f, &mut g.b_f),
        1 => (&mut g.w_i, &mut g.u_i, &mut g.b_i),
        2 => (&mut g.w_c, &mut g.u_c, &mut g.b_c),
        _ => (&mut g.w_o, &mut g.u_o, &mut g.b_o),
    }
}

/// Loss terms for one sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub mse: f64,
    pub r1: f64,
    pub r2: f64,
}

/// Mean squared one-sequence free-run error after the washout, from zero state.
fn mse_and_grad(w: &LstmWeights, seq: &NormSeq, washout: usize, grad: Option<&mut LstmWeights>) -> Result<f64> {
    let n = w.n;
    let len = seq.u.len();
    if seq.y.len() != len || w.m != 1 || w.p != 1 {
        return Err(Error::Dimension("training expects SISO sequences of equal length".into()));
    }
    if len <= washout {
        return Err(Error::Argument("sequence shorter than washout".into()));
    }
    let count = (len - washout) as f64;
    // Forward pass, caching per-step quantities.
    let mut cs = vec![vec![0.0; n]; len];
    let mut hs = vec![vec![0.0; n]; len];
    let mut gates = vec![[vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]]; len];
    let mut dy = vec![0.0; len];
    let mut sse = 0.0;
    for k in 0..len {
        let y = crate::numerics::dot(w.w_y.row(0), &hs[k]) + w.b_y[0];
        if !y.is_finite() {
            return Err(Error::Training(format!("non-finite prediction at step {k}")));
        }
        if k >= washout {
            let e = y - seq.y[k];
            sse += e * e;
            dy[k] = 2.0 * e / count;
        }
        if k + 1 == len {
            break;
        }
        let u = seq.u[k];
        let mut next_c = vec![0.0; n];
        let mut next_h = vec![0.0; n];
        for j in 0..n {
            let mut z = [0.0; 4];
            for (g, zg) in z.iter_mut().enumerate() {
                *zg = w.w(g)[(j, 0)] * u + w.b(g)[j] + crate::numerics::dot(w.u(g).row(j), &hs[k]);
            }
            let (f, i, gc, o) = (sigmoid(z[0]), sigmoid(z[1]), z[2].tanh(), sigmoid(z[3]));
            gates[k][0][j] = f;
            gates[k][1][j] = i;
            gates[k][2][j] = gc;
            gates[k][3][j] = o;
            next_c[j] = f * cs[k][j] + i * gc;
            next_h[j] = o * next_c[j].tanh();
        }
        cs[k + 1] = next_c;
        hs[k + 1] = next_h;
    }
    let mse = sse / count;
    let Some(grad) = grad else {
        return Ok(mse);
    };

    // Backward pass.
    let mut dh: Vec<f64> = w.w_y.row(0).iter().map(|v| v * dy[len - 1]).collect();
    let mut dc = vec![0.0; n];
    for j in 0..n {
        grad.w_y[(0, j)] += dy[len - 1] * hs[len - 1][j];
    }
    grad.b_y[0] += dy[len - 1];
    for k in (0..len - 1).rev() {
        let [f, i, gc, o] = &gates[k];
        let mut dz = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        let mut dc_prev = vec![0.0; n];
        for j in 0..n {
            let tc = cs[k + 1][j].tanh();
            let dct = dc[j] + dh[j] * o[j] * (1.0 - tc * tc);
            dz[3][j] = dh[j] * tc * o[j] * (1.0 - o[j]);
            dz[0][j] = dct * cs[k][j] * f[j] * (1.0 - f[j]);
            dz[1][j] = dct * gc[j] * i[j] * (1.0 - i[j]);
            dz[2][j] = dct * i[j] * (1.0 - gc[j] * gc[j]);
            dc_prev[j] = dct * f[j];
        }
        let mut dh_prev: Vec<f64> = w.w_y.row(0).iter().map(|v| v * dy[k]).collect();
        for j in 0..n {
            grad.w_y[(0, j)] += dy[k] * hs[k][j];
        }
        grad.b_y[0] += dy[k];
        let u = seq.u[k];
        for (g, dzg) in dz.iter().enumerate() {
            let um = w.u(g);
            for r in 0..n {
                let d = dzg[r];
                if d == 0.0 {
                    continue;
                }
                for c in 0..n {
                    dh_prev[c] += um[(r, c)] * d;
                }
            }
            let (gw, gu, gb) = grad_gate_mut(grad, g);
            for r in 0..n {
                let d = dzg[r];
                gw[(r, 0)] += d * u;
                gb[r] += d;
                for c in 0..n {
                    gu[(r, c)] += d * hs[k][c];
                }
            }
        }
        dh = dh_prev;
        dc = dc_prev;
    }
    Ok(mse)
}

/// Loss `MSE + λ₁ max(r₁,0) + λ₁ max(r₂,0) + λ₂ min(r₁,0) + λ₂ min(r₂,0)`,
/// optionally accumulating its gradient into `grad`.
pub fn loss(
    w: &LstmWeights,
    seq: &NormSeq,
    cfg: &TrainConfig,
    mut grad: Option<&mut LstmWeights>,
) -> Result<LossValue> {
    let mse = mse_and_grad(w, seq, cfg.washout, grad.as_deref_mut())?;
    let (pen, r1, r2) = penalty(w, cfg.lambda1, cfg.lambda2, grad);
    Ok(LossValue {
        total: mse + pen,
        mse,
        r1,
        r2,
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(size: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
            lr,
        }
    }

    fn update(&mut self, w: &mut LstmWeights, g: &LstmWeights) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let grads: Vec<f64> = g.params().concat();
        let mut idx = 0;
        for tensor in w.params_mut() {
            for v in tensor.iter_mut() {
                let gi = grads[idx];
                self.m[idx] = Self::B1 * self.m[idx] + (1.0 - Self::B1) * gi;
                self.v[idx] = Self::B2 * self.v[idx] + (1.0 - Self::B2) * gi * gi;
                *v -= self.lr * (self.m[idx] / c1) / ((self.v[idx] / c2).sqrt() + Self::EPS);
                idx += 1;
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_mse: f64,
    pub r1: f64,
    pub r2: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: LstmWeights,
    pub epochs_run: usize,
    pub history: Vec<EpochLog>,
}

fn certified_margins(w: &LstmWeights) -> (bool, f64, f64) {
    let iss = delta_iss_check(w);
    let (r1, r2) = (iss.jury_margin_left, iss.jury_margin_right);
    (r1 < 0.0 && r2 < 0.0 && iss.certified(), r1, r2)
}

/// Adam over one-sequence batches with per-epoch shuffling. Runs `cfg.epochs`
/// epochs and keeps going, up to `cfg.max_epoch_factor × epochs`, until the
/// weights pass the stability check.
pub fn train_from(
    init: LstmWeights,
    train: &[NormSeq],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("no training sequences".into()));
    }
    let mut w = init;
    let size: usize = w.params().iter().map(|t| t.len()).sum();
    let mut adam = Adam::new(size, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let cap = cfg.epochs * cfg.max_epoch_factor;
    let mut history = Vec::new();
    let mut epoch = 0;
    loop {
        let (ok, r1, r2) = certified_margins(&w);
        if epoch >= cfg.epochs && ok {
            break;
        }
        if epoch >= cap {
            return Err(Error::Training(format!(
                "not certified after {epoch} epochs (r1 = {r1:.4e}, r2 = {r2:.4e})"
            )));
        }
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_mse) = (0.0, 0.0);
        for &s in &order {
            let mut g = LstmWeights::zeros(w.n, w.m, w.p, w.u_max);
            let lv = loss(&w, &train[s], cfg, Some(&mut g))
                .map_err(|e| Error::Training(format!("epoch {epoch}, sequence {s}: {e}")))?;
            sum_loss += lv.total;
            sum_mse += lv.mse;
            adam.update(&mut w, &g);
        }
        let (_, r1, r2) = certified_margins(&w);
        let log = EpochLog {
            epoch,
            mean_loss: sum_loss / train.len() as f64,
            mean_mse: sum_mse / train.len() as f64,
            r1,
            r2,
        };
        on_epoch(&log);
        history.push(log);
        epoch += 1;
    }
    Ok(TrainOutcome {
        weights: w,
        epochs_run: epoch,
        history,
    })
}

/// Initialize from `cfg` and train on the dataset's training split.
pub fn train(data: &Dataset, cfg: &TrainConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let u_max = input_bound(&data.normalizer);
    let init = init_weights(cfg.hidden, 1, 1, u_max, cfg.init_scale, cfg.seed);
    train_from(init, &data.normalized(Split::Train), cfg, on_epoch)
}

/// `u_max` covering the whole admissible input set after normalization
/// (slightly above 1 when the training extrema sit inside `U_φ`).
pub fn input_bound(nrm: &Normalizer) -> f64 {
    nrm.normalize(plant::U_PHI_MIN, Channel::Input)
        .abs()
        .max(nrm.normalize(plant::U_PHI_MAX, Channel::Input).abs())
        .max(1.0)
}

/// `100 (1 − ‖y − ŷ‖ / ‖y − ȳ‖)`
pub fn fit_index(y_real: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_real.len() != y_pred.len() || y_real.len() < 2 {
        return Err(Error::Argument("FIT needs equal-length traces of at least 2 samples".into()));
    }
    let mean = y_real.iter().sum::<f64>() / y_real.len() as f64;
    let den: f64 = y_real.iter().map(|y| (y - mean).powi(2)).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("constant reference trace".into()));
    }
    let num: f64 = y_real.iter().zip(y_pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    Ok(100.0 * (1.0 - num / den))
}

/// Free-run FIT over a set of sequences (concatenated), excluding each washout.
pub fn fit_on(w: &LstmWeights, seqs: &[NormSeq], washout: usize) -> Result<f64> {
    let (mut real, mut pred) = (Vec::new(), Vec::new());
    for s in seqs {
        let us: Vec<Vec<f64>> = s.u.iter().map(|&u| vec![u]).collect();
        let ys = crate::lstm::simulate(w, &crate::lstm::LstmState::zeros(w.n), &us)?;
        real.extend_from_slice(&s.y[washout..]);
        pred.extend(ys[washout..].iter().map(|y| y[0]));
    }
    fit_index(&real, &pred)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn excitation_exact_segments() {
        let u = generate_excitation(3, (12.5, 17.0), (5, 5), 15).unwrap();
        assert_eq!(u.len(), 15);
        for seg in u.chunks(5) {
            assert!(seg.iter().all(|v| *v == seg[0]));
        }
        assert!(u[0] != u[5] && u[5] != u[10]);
        assert!(generate_excitation(3, (1.0, 0.0), (5, 5), 15).is_err());
        assert!(generate_excitation(3, (0.0, 1.0), (6, 5), 15).is_err());
    }

    #[test]
    fn excitation_is_deterministic_and_in_range() {
        let a = generate_excitation(42, (12.5, 17.0), (10, 100), 1500).unwrap();
        let b = generate_excitation(42, (12.5, 17.0), (10, 100), 1500).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|u| (12.5..=17.0).contains(u)));
    }

    #[test]
    fn hold_lengths_roughly_uniform() {
        // Count complete segments over many traces and χ²-test against uniform on 10..=100
        // in 7 bins of 13 lengths each.
        let mut counts = [0usize; 7];
        for seed in 0..400 {
            let u = generate_excitation(seed, (0.0, 1.0), (10, 100), 1500).unwrap();
            let mut start = 0;
            for k in 1..u.len() {
                if u[k] != u[k - 1] {
                    let len = k - start;
                    if start > 0 || len > 0 {
                        counts[(len - 10) / 13] += 1;
                    }
                    start = k;
                }
            }
        }
        let total: usize = counts.iter().sum();
        let expect = total as f64 / 7.0;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - expect).powi(2) / expect).sum();
        // 6 dof, p = 0.001 critical value ≈ 22.46
        assert!(chi2 < 22.46, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn fit_examples() {
        let y = [1.0, 2.0, 4.0, 3.0];
        assert_eq!(fit_index(&y, &y).unwrap(), 100.0);
        assert!(fit_index(&y, &[2.5; 4]).unwrap().abs() < 1e-12);
        assert!(matches!(fit_index(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::UndefinedMetric(_))));
        // hand-computed: mean 2.5, ‖y−ȳ‖ = √5, error (0.5, 0, 0, −0.5) → √0.5
        let f = fit_index(&y, &[0.5, 2.0, 4.0, 3.5]).unwrap();
        assert!((f - 100.0 * (1.0 - (0.5f64).sqrt() / 5f64.sqrt())).abs() < 1e-12);
    }

    fn small_seq(len: usize, seed: u64) -> NormSeq {
        let u = generate_excitation(seed, (-1.0, 1.0), (2, 6), len).unwrap();
        let y = u.iter().enumerate().map(|(k, v)| 0.5 * v + 0.1 * (k as f64).sin()).collect();
        NormSeq { u, y }
    }

    #[test]
    fn loss_reduces_to_mse_without_penalties() {
        let w = init_weights(3, 1, 1, 1.0, 0.3, 1);
        let seq = small_seq(30, 2);
        let cfg = TrainConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            washout: 5,
            ..TrainConfig::default()
        };
        let lv = loss(&w, &seq, &cfg, None).unwrap();
        assert_eq!(lv.total, lv.mse);
        // oracle: simulate and average
        let us: Vec<Vec<f64>> = seq.u.iter().map(|&u| vec![u]).collect();
        let ys = crate::lstm::simulate(&w, &crate::lstm::LstmState::zeros(3), &us).unwrap();
        let mse: f64 = (5..30).map(|k| (ys[k][0] - seq.y[k]).powi(2)).sum::<f64>() / 25.0;
        assert!((lv.mse - mse).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictor_has_penalty_only_loss() {
        let w = init_weights(3, 1, 1, 1.0, 0.1, 4);
        let mut seq = small_seq(20, 9);
        let us: Vec<Vec<f64>> = seq.u.iter().map(|&u| vec![u]).collect();
        seq.y = crate::lstm::simulate(&w, &crate::lstm::LstmState::zeros(3), &us)
            .unwrap()
            .iter()
            .map(|y| y[0])
            .collect();
        let cfg = TrainConfig {
            washout: 0,
            ..TrainConfig::default()
        };
        let lv = loss(&w, &seq, &cfg, None).unwrap();
        assert!(lv.r1 < 0.0 && lv.r2 < 0.0);
        assert!(lv.mse < 1e-28);
        assert!((lv.total - 0.02 * (lv.r1 + lv.r2)).abs() < 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..3 {
            let mut w = init_weights(3, 1, 1, 1.0, 0.6, trial);
            // push the forget gate up for a positive r₁ on one trial
            if trial == 1 {
                w.b_f.iter_mut().for_each(|b| *b += 2.0);
            }
            let seq = small_seq(20, 100 + trial);
            let cfg = TrainConfig {
                lambda1: 0.3,
                lambda2: 0.2,
                washout: 3,
                ..TrainConfig::default()
            };
            let mut g = LstmWeights::zeros(3, 1, 1, 1.0);
            loss(&w, &seq, &cfg, Some(&mut g)).unwrap();
            let analytic = g.params().concat();
            let eps = 1e-5;
            let total = analytic.len();
            for idx in 0..total {
                let eval = |delta: f64| {
                    let mut wp = w.clone();
                    let mut i = idx;
                    for t in wp.params_mut() {
                        if i < t.len() {
                            t[i] += delta;
                            break;
                        }
                        i -= t.len();
                    }
                    loss(&wp, &seq, &cfg, None).unwrap().total
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic[idx];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(err < 1e-4, "trial {trial} param {idx}: analytic {a}, fd {fd}");
            }
            let _ = rng.random::<u8>();
        }
    }

    #[test]
    fn zero_epochs_on_certified_init_is_identity() {
        let w = init_weights(3, 1, 1, 1.0, 0.1, 5);
        assert!(delta_iss_check(&w).certified());
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_from(w.clone(), &[small_seq(60, 1)], &cfg, |_| {}).unwrap();
        assert_eq!(out.weights, w);
        assert_eq!(out.epochs_run, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let seqs = vec![small_seq(80, 1), small_seq(80, 2)];
        let cfg = TrainConfig {
            epochs: 3,
            washout: 5,
            hidden: 3,
            ..TrainConfig::default()
        };
        let a = train_from(init_weights(3, 1, 1, 1.0, 0.1, 9), &seqs, &cfg, |_| {}).unwrap();
        let b = train_from(init_weights(3, 1, 1, 1.0, 0.1, 9), &seqs, &cfg, |_| {}).unwrap();
        assert_eq!(a.weights, b.weights);
    }

    #[test]
    fn penalty_drives_margins_down() {
        // Adversarial init: strong forget bias and recurrent weights make r₁ > 0.
        let mut w = init_weights(3, 1, 1, 1.0, 0.1, 3);
        w.b_f.iter_mut().for_each(|b| *b = 3.0);
        w.b_i.iter_mut().for_each(|b| *b = 2.0);
        w.u_o = Mat::identity(3).scale(2.0);
        w.u_f = Mat::identity(3).scale(1.0);
        let r0 = delta_iss_check(&w).jury_margin_left;
        assert!(r0 > 0.0);
        let cfg = TrainConfig {
            epochs: 5,
            lambda1: 5.0,
            lambda2: 0.0,
            learning_rate: 0.01,
            washout: 5,
            max_epoch_factor: 1000,
            ..TrainConfig::default()
        };
        let seqs = vec![small_seq(40, 1)];
        let mut margins = vec![r0];
        let _ = train_from(w, &seqs, &cfg, |log| margins.push(log.r1));
        for pair in margins.windows(2).take(5) {
            assert!(pair[1] < pair[0], "{margins:?}");
        }
    }
}
