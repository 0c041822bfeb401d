//! Small dense linear algebra.
//!
//! Every matrix in this crate is tiny (the largest analysis matrix is 3×3, the
//! largest Jacobian is (2n+m)×(2n+m)), so everything here is straightforward
//! row-major code with no blocking or pivot tricks beyond partial pivoting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for Mat {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Mat::from_rows(&rows)
    }
}

impl From<Mat> for Vec<Vec<f64>> {
    fn from(m: Mat) -> Self {
        (0..m.rows).map(|r| m.row(r).to_vec()).collect()
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Mat::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from row-major data. Fails on length mismatch or non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{}x{} matrix needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("matrix entries must be finite".into()));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Mat::from_vec(r, c, rows.concat())
    }

    /// Column vector.
    pub fn column(v: &[f64]) -> Self {
        Mat {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(r, k)];
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other[(k, c)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ v`
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "matvec_t shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (r, vr) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        out
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// Horizontal concatenation `[a b c ...]`.
    pub fn hcat(blocks: &[&Mat]) -> Result<Mat> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::Dimension("hcat row count mismatch".into()));
        }
        let cols: usize = blocks.iter().map(|b| b.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for b in blocks {
                out.row_mut(r)[off..off + b.cols].copy_from_slice(b.row(r));
                off += b.cols;
            }
        }
        Ok(out)
    }

    /// `vᵀ M v`
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.matvec(v))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in r + 1..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)]).abs());
            }
        }
        worst
    }

    pub fn symmetrized(&self) -> Mat {
        let t = self.transpose();
        self.add(&t).scale(0.5)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn sub_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Maximum absolute row sum.
pub fn induced_inf_norm(m: &Mat) -> f64 {
    (0..m.rows)
        .map(|r| m.row(r).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest singular value, `sqrt(λ_max(mᵀm))`.
pub fn induced_two_norm(m: &Mat) -> f64 {
    if m.rows == 0 || m.cols == 0 {
        return 0.0;
    }
    // Gram matrix on the smaller side.
    let gram = if m.rows <= m.cols {
        m.matmul(&m.transpose())
    } else {
        m.transpose().matmul(m)
    };
    let (vals, _) = symmetric_eigen(&gram);
    vals.iter().cloned().fold(0.0, f64::max).max(0.0).sqrt()
}

/// Leading singular triple `(σ₁, u₁, v₁)` with `m v₁ = σ₁ u₁`.
///
/// The gradient of `‖m‖` with respect to `m` is `u₁ v₁ᵀ` whenever σ₁ is simple.
pub fn leading_singular_pair(m: &Mat) -> (f64, Vec<f64>, Vec<f64>) {
    let gram = m.transpose().matmul(m);
    let (vals, vecs) = symmetric_eigen(&gram);
    let (k, _) = vals
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best });
    let v: Vec<f64> = (0..m.cols).map(|r| vecs[(r, k)]).collect();
    let mv = m.matvec(&v);
    let sigma = norm2(&mv);
    let u = if sigma > 0.0 {
        mv.iter().map(|x| x / sigma).collect()
    } else {
        let mut e = vec![0.0; m.rows];
        if let Some(first) = e.first_mut() {
            *first = 1.0;
        }
        e
    };
    (sigma, u, v)
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
///
/// Returns eigenvalues (unsorted) and the matrix whose columns are the
/// corresponding orthonormal eigenvectors.
pub fn symmetric_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    let n = m.rows;
    let mut a = m.symmetrized();
    let mut v = Mat::identity(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= 1e-17 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[(i, i)]).collect(), v)
}

/// A (possibly complex) eigenvalue.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl Eigenvalue {
    pub fn modulus(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

fn real(re: f64) -> Eigenvalue {
    Eigenvalue { re, im: 0.0 }
}

/// Roots of `λ² − tλ + d`.
fn quadratic_roots(t: f64, d: f64) -> [Eigenvalue; 2] {
    let half = 0.5 * t;
    let disc = half * half - d;
    if disc >= 0.0 {
        let s = disc.sqrt();
        let big = if half >= 0.0 { half + s } else { half - s };
        let small = if big != 0.0 { d / big } else { 0.0 };
        [real(big), real(small)]
    } else {
        let s = (-disc).sqrt();
        [Eigenvalue { re: half, im: s }, Eigenvalue { re: half, im: -s }]
    }
}

/// Eigenvalues of a 3×3 matrix from its characteristic cubic.
fn cubic_eigenvalues(m: &Mat) -> [Eigenvalue; 3] {
    // λ³ + a λ² + b λ + c
    let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let minors = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)] + m[(0, 0)] * m[(2, 2)]
        - m[(0, 2)] * m[(2, 0)]
        + m[(1, 1)] * m[(2, 2)]
        - m[(1, 2)] * m[(2, 1)];
    let det = m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
        - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
        + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]);
    let (a, b, c) = (-tr, minors, -det);

    // Depressed cubic t³ + p t + q with λ = t − a/3.
    let shift = a / 3.0;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let disc = (q / 2.0).powi(2) + (p / 3.0).powi(3);
    let t0 = if p == 0.0 && q == 0.0 {
        0.0
    } else if disc > 0.0 {
        let s = disc.sqrt();
        (-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt()
    } else {
        // Three real roots; take the largest trigonometric one.
        let r = (-p / 3.0).sqrt();
        let arg = (-q / (2.0 * r * r * r)).clamp(-1.0, 1.0);
        2.0 * r * (arg.acos() / 3.0).cos()
    };
    let mut root = t0 - shift;
    // Newton polish on the original cubic.
    for _ in 0..4 {
        let f = ((root + a) * root + b) * root + c;
        let df = (3.0 * root + 2.0 * a) * root + b;
        if df == 0.0 {
            break;
        }
        let step = f / df;
        root -= step;
        if step.abs() <= 1e-16 * root.abs().max(1.0) {
            break;
        }
    }
    // Deflate: λ³ + aλ² + bλ + c = (λ − r)(λ² + e λ + f)
    let e = a + root;
    let f = b + root * e;
    let [l1, l2] = quadratic_roots(-e, f);
    [real(root), l1, l2]
}

/// All eigenvalues of a square matrix.
///
/// 1×1, 2×2 and 3×3 use the characteristic polynomial in closed form;
/// larger matrices go through Hessenberg reduction and Francis double-shift QR.
pub fn eigenvalues(m: &Mat) -> Result<Vec<Eigenvalue>> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "eigenvalues need a square matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    Ok(match m.rows {
        0 => vec![],
        1 => vec![real(m[(0, 0)])],
        2 => {
            let t = m[(0, 0)] + m[(1, 1)];
            let d = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
            quadratic_roots(t, d).to_vec()
        }
        3 => cubic_eigenvalues(m).to_vec(),
        _ => qr_eigenvalues(m),
    })
}

/// Max modulus eigenvalue.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    Ok(eigenvalues(m)?
        .iter()
        .map(Eigenvalue::modulus)
        .fold(0.0, f64::max))
}

fn hessenberg(m: &Mat) -> Mat {
    let n = m.rows;
    let mut h = m.clone();
    for k in 0..n.saturating_sub(2) {
        let x: Vec<f64> = (k + 1..n).map(|r| h[(r, k)]).collect();
        let v = householder_vec(&x);
        reflect(&mut h, k + 1, &v);
        for r in k + 2..n {
            h[(r, k)] = 0.0;
        }
    }
    h
}

/// Apply the reflector `I − 2vvᵀ/(vᵀv)` on rows/cols `start..start+v.len()` as a similarity.
fn reflect(h: &mut Mat, start: usize, v: &[f64]) {
    let n = h.rows;
    let vv = dot(v, v);
    if vv == 0.0 {
        return;
    }
    for c in 0..n {
        let s: f64 = (0..v.len()).map(|i| v[i] * h[(start + i, c)]).sum::<f64>() * 2.0 / vv;
        for i in 0..v.len() {
            h[(start + i, c)] -= s * v[i];
        }
    }
    for r in 0..n {
        let s: f64 = (0..v.len()).map(|i| h[(r, start + i)] * v[i]).sum::<f64>() * 2.0 / vv;
        for i in 0..v.len() {
            h[(r, start + i)] -= s * v[i];
        }
    }
}

fn householder_vec(x: &[f64]) -> Vec<f64> {
    let alpha = norm2(x);
    let mut v = x.to_vec();
    if alpha == 0.0 {
        return v;
    }
    v[0] += if x[0] >= 0.0 { alpha } else { -alpha };
    v
}

fn qr_eigenvalues(m: &Mat) -> Vec<Eigenvalue> {
    const MAX_ITERS: usize = 200;
    let n = m.rows;
    let mut h = hessenberg(m);
    let mut out = Vec::with_capacity(n);
    let mut hi = n as isize - 1;
    let mut iters = 0;
    while hi >= 0 {
        let hiu = hi as usize;
        if hiu == 0 {
            out.push(real(h[(0, 0)]));
            break;
        }
        // Find the start of the unreduced block ending at hi.
        let mut lo = hiu;
        while lo > 0 {
            let s = h[(lo - 1, lo - 1)].abs() + h[(lo, lo)].abs();
            let s = if s == 0.0 { 1.0 } else { s };
            if h[(lo, lo - 1)].abs() <= f64::EPSILON * s {
                h[(lo, lo - 1)] = 0.0;
                break;
            }
            lo -= 1;
        }
        if lo == hiu {
            out.push(real(h[(hiu, hiu)]));
            hi -= 1;
            iters = 0;
            continue;
        }
        if lo + 1 == hiu {
            let t = h[(hiu - 1, hiu - 1)] + h[(hiu, hiu)];
            let d = h[(hiu - 1, hiu - 1)] * h[(hiu, hiu)] - h[(hiu - 1, hiu)] * h[(hiu, hiu - 1)];
            out.extend(quadratic_roots(t, d));
            hi -= 2;
            iters = 0;
            continue;
        }
        iters += 1;
        if iters > MAX_ITERS {
            // Give up on the block: report its diagonal.
            for i in (lo..=hiu).rev() {
                out.push(real(h[(i, i)]));
            }
            hi = lo as isize - 1;
            iters = 0;
            continue;
        }
        // Francis double shift on [lo, hi].
        let (s, t) = if iters % 11 == 10 {
            // exceptional shift
            let w = h[(hiu, hiu - 1)].abs() + h[(hiu - 1, hiu - 2)].abs();
            (1.5 * w, w * w)
        } else {
            let a = h[(hiu - 1, hiu - 1)];
            let b = h[(hiu - 1, hiu)];
            let c = h[(hiu, hiu - 1)];
            let d = h[(hiu, hiu)];
            (a + d, a * d - b * c)
        };
        let mut x = h[(lo, lo)] * h[(lo, lo)] + h[(lo, lo + 1)] * h[(lo + 1, lo)] - s * h[(lo, lo)] + t;
        let mut y = h[(lo + 1, lo)] * (h[(lo, lo)] + h[(lo + 1, lo + 1)] - s);
        let mut z = h[(lo + 1, lo)] * h[(lo + 2, lo + 1)];
        for k in lo..=hiu - 2 {
            let v = householder_vec(&[x, y, z]);
            reflect(&mut h, k, &v);
            x = h[(k + 1, k)];
            y = h[(k + 2, k)];
            if k + 3 <= hiu {
                z = h[(k + 3, k)];
            }
        }
        let v = householder_vec(&[x, y]);
        reflect(&mut h, hiu - 1, &v);
        // Clean the fill-in below the subdiagonal created by rounding.
        for r in lo + 2..=hiu {
            for c in lo..r - 1 {
                h[(r, c)] = 0.0;
            }
        }
    }
    out
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    if !a.is_square() || a.rows != b.len() {
        return Err(Error::Dimension("solve_linear shape mismatch".into()));
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let (piv, pval) = (k..n)
            .map(|r| (r, m[(r, k)].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval <= 1e-300_f64.max(f64::EPSILON * 1e-4 * scale) {
            return Err(Error::Singular);
        }
        if piv != k {
            for c in 0..n {
                let tmp = m[(k, c)];
                m[(k, c)] = m[(piv, c)];
                m[(piv, c)] = tmp;
            }
            x.swap(k, piv);
        }
        for r in k + 1..n {
            let f = m[(r, k)] / m[(k, k)];
            if f == 0.0 {
                continue;
            }
            for c in k..n {
                m[(r, c)] -= f * m[(k, c)];
            }
            x[r] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|c| m[(k, c)] * x[c]).sum();
        x[k] = (x[k] - s) / m[(k, k)];
    }
    Ok(x)
}

pub fn inverse(a: &Mat) -> Result<Mat> {
    let n = a.rows;
    let mut inv = Mat::zeros(n, n);
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let col = solve_linear(a, &e)?;
        for r in 0..n {
            inv[(r, c)] = col[r];
        }
    }
    Ok(inv)
}

fn induced_one_norm(m: &Mat) -> f64 {
    induced_inf_norm(&m.transpose())
}

/// `‖a‖₁ ‖a⁻¹‖₁`, infinite when `a` is singular.
pub fn condition_estimate(a: &Mat) -> f64 {
    match inverse(a) {
        Ok(inv) => induced_one_norm(a) * induced_one_norm(&inv),
        Err(_) => f64::INFINITY,
    }
}

/// Smallest and largest eigenvalue of a symmetric positive definite matrix.
pub fn eig_extrema_spd(m: &Mat) -> Result<(f64, f64)> {
    if !m.is_square() {
        return Err(Error::Dimension("eig_extrema_spd needs a square matrix".into()));
    }
    let asym = m.max_asymmetry();
    if asym > 1e-10 * m.max_abs().max(1.0) {
        return Err(Error::Argument(format!("matrix not symmetric (asymmetry {asym:.3e})")));
    }
    let (vals, _) = symmetric_eigen(m);
    let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(lo > 0.0) {
        return Err(Error::Argument(format!("matrix not positive definite (λ_min = {lo:.3e})")));
    }
    Ok((lo, hi))
}

/// Solve `aᵀ P a − P = −q` for symmetric positive definite `P`.
///
/// Uses the Kronecker form `(aᵀ ⊗ aᵀ − I) vec(P) = −vec(q)` (row-major vec).
pub fn solve_discrete_lyapunov(a: &Mat, q: &Mat) -> Result<Mat> {
    if !a.is_square() || !q.is_square() || a.rows != q.rows {
        return Err(Error::Dimension("lyapunov: a and q must be square and equal size".into()));
    }
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    eig_extrema_spd(q)?;
    let d = a.rows;
    let at = a.transpose();
    let nn = d * d;
    let mut k = Mat::zeros(nn, nn);
    for i in 0..d {
        for j in 0..d {
            for r in 0..d {
                for s in 0..d {
                    // vec_r(X P Y)[i*d + r] picks X[i][j] P[j][s] Y[s][r]; with X = aᵀ, Y = a.
                    k[(i * d + r, j * d + s)] = at[(i, j)] * a[(s, r)];
                }
            }
        }
    }
    for i in 0..nn {
        k[(i, i)] -= 1.0;
    }
    let rhs: Vec<f64> = q.data.iter().map(|v| -v).collect();
    let p = solve_linear(&k, &rhs)?;
    Ok(Mat::from_vec(d, d, p)?.symmetrized())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    // Independent oracle: power iteration on mᵀm.
    fn power_iteration_two_norm(m: &Mat) -> f64 {
        let g = m.transpose().matmul(m);
        let mut v = vec![1.0; g.cols()];
        let mut lambda = 0.0;
        for _ in 0..5000 {
            let w = g.matvec(&v);
            let nw = norm2(&w);
            lambda = nw;
            v = w.iter().map(|x| x / nw).collect();
        }
        lambda.sqrt()
    }

    #[test]
    fn two_norm_examples() {
        assert!((induced_two_norm(&Mat::identity(3)) - 1.0).abs() < 1e-15);
        assert!((induced_two_norm(&Mat::from_diag(&[3.0, -4.0])) - 4.0).abs() < 1e-14);
        assert_eq!(induced_two_norm(&Mat::zeros(0, 0)), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_mat(&mut rng, 4, 3, -1.0, 1.0);
        let oracle = power_iteration_two_norm(&m);
        assert!((induced_two_norm(&m) - oracle).abs() < 1e-10, "{} vs {}", induced_two_norm(&m), oracle);
    }

    #[test]
    fn inf_norm_examples() {
        assert_eq!(induced_inf_norm(&Mat::identity(2)), 1.0);
        let m = Mat::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap();
        assert_eq!(induced_inf_norm(&m), 3.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_mat(&mut rng, 5, 1, -1.0, 1.0);
        let u = random_mat(&mut rng, 5, 5, -1.0, 1.0);
        let b = random_mat(&mut rng, 5, 1, -1.0, 1.0);
        let cat = Mat::hcat(&[&w.scale(1.0), &u, &b]).unwrap();
        let mut oracle: f64 = 0.0;
        for r in 0..5 {
            let mut s = w[(r, 0)].abs() + b[(r, 0)].abs();
            for c in 0..5 {
                s += u[(r, c)].abs();
            }
            oracle = oracle.max(s);
        }
        assert!((induced_inf_norm(&cat) - oracle).abs() < 1e-15);
    }

    #[test]
    fn spectral_radius_examples() {
        let d = Mat::from_rows(&[vec![0.5, 0.0], vec![0.0, -0.9]]).unwrap();
        assert!((spectral_radius(&d).unwrap() - 0.9).abs() < 1e-15);
        let th: f64 = 0.7;
        let rot = Mat::from_rows(&[vec![th.cos(), -th.sin()], vec![th.sin(), th.cos()]])
            .unwrap()
            .scale(0.7);
        assert!((spectral_radius(&rot).unwrap() - 0.7).abs() < 1e-12);
        assert!(spectral_radius(&Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn spectral_radius_nonnegative_3x3_matches_power_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = random_mat(&mut rng, 3, 3, 0.0, 1.0);
            let mut v = vec![1.0; 3];
            let mut lam = 0.0;
            for _ in 0..2000 {
                let w = m.matvec(&v);
                lam = norm2(&w) / norm2(&v);
                let nw = norm2(&w);
                v = w.iter().map(|x| x / nw).collect();
            }
            let rho = spectral_radius(&m).unwrap();
            assert!((rho - lam).abs() < 1e-8, "{rho} vs {lam}");
        }
    }

    #[test]
    fn qr_eigenvalues_match_closed_form_on_block_diagonal() {
        // 4x4 block diagonal with a known complex pair and two reals, then similarity-mixed.
        let th: f64 = 1.1;
        let mut b = Mat::zeros(4, 4);
        b[(0, 0)] = 0.6 * th.cos();
        b[(0, 1)] = -0.6 * th.sin();
        b[(1, 0)] = 0.6 * th.sin();
        b[(1, 1)] = 0.6 * th.cos();
        b[(2, 2)] = -0.8;
        b[(3, 3)] = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_mat(&mut rng, 4, 4, -1.0, 1.0).add(&Mat::identity(4).scale(2.0));
        let m = s.matmul(&b).matmul(&inverse(&s).unwrap());
        let mut mods: Vec<f64> = eigenvalues(&m).unwrap().iter().map(|e| e.modulus()).collect();
        mods.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want = [0.3, 0.6, 0.6, 0.8];
        for (g, w) in mods.iter().zip(want) {
            assert!((g - w).abs() < 1e-9, "{mods:?}");
        }
    }

    #[test]
    fn lyapunov_examples() {
        let p = solve_discrete_lyapunov(&Mat::zeros(2, 2), &Mat::identity(2)).unwrap();
        assert!(p.sub(&Mat::identity(2)).max_abs() < 1e-15);
        let p = solve_discrete_lyapunov(&Mat::from_diag(&[0.5]), &Mat::from_diag(&[1.0])).unwrap();
        assert!((p[(0, 0)] - 4.0 / 3.0).abs() < 1e-14);
        assert!(matches!(
            solve_discrete_lyapunov(&Mat::from_diag(&[1.2, 0.1]), &Mat::identity(2)),
            Err(Error::Unstable { .. })
        ));
        assert!(matches!(
            solve_discrete_lyapunov(&Mat::from_diag(&[0.2, 0.1]), &Mat::from_diag(&[1.0, -1.0])),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn lyapunov_random_stable_residual_and_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let raw = random_mat(&mut rng, 3, 3, -1.0, 1.0);
            let rho = spectral_radius(&raw).unwrap();
            let a = raw.scale(0.9 / rho.max(1e-3));
            let l = random_mat(&mut rng, 3, 3, -1.0, 1.0);
            let q = l.matmul(&l.transpose()).add(&Mat::identity(3).scale(0.1));
            let p = solve_discrete_lyapunov(&a, &q).unwrap();
            let resid = a.transpose().matmul(&p).matmul(&a).sub(&p).add(&q);
            assert!(resid.max_abs() < 1e-9 * q.max_abs().max(1.0) * 10.0);
            let (lo, _) = eig_extrema_spd(&p).unwrap();
            assert!(lo > 0.0);
            for _ in 0..1000 {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                assert!(p.quad_form(&v) > 0.0);
                let r = resid.quad_form(&v).abs();
                assert!(r < 1e-8 * dot(&v, &v) * p.max_abs().max(1.0));
            }
        }
    }

    #[test]
    fn eig_extrema_examples() {
        assert_eq!(eig_extrema_spd(&Mat::identity(3)).unwrap(), (1.0, 1.0));
        let (lo, hi) = eig_extrema_spd(&Mat::from_diag(&[2.0, 5.0])).unwrap();
        assert!((lo - 2.0).abs() < 1e-15 && (hi - 5.0).abs() < 1e-15);
        let asym = Mat::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(eig_extrema_spd(&asym), Err(Error::Argument(_))));
    }

    #[test]
    fn rayleigh_quotients_bracket_extrema() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random_mat(&mut rng, 3, 3, -1.0, 1.0);
        let p = l.matmul(&l.transpose()).add(&Mat::identity(3).scale(0.05));
        let (lo, hi) = eig_extrema_spd(&p).unwrap();
        for _ in 0..2000 {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rq = p.quad_form(&v) / dot(&v, &v);
            assert!(rq >= lo - 1e-12 && rq <= hi + 1e-12);
        }
    }

    #[test]
    fn leading_singular_pair_reconstructs_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_mat(&mut rng, 5, 5, -1.0, 1.0);
        let (s, u, v) = leading_singular_pair(&m);
        assert!((s - induced_two_norm(&m)).abs() < 1e-12);
        assert!((dot(&u, &m.matvec(&v)) - s).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn radius_bounded_by_two_norm(entries in proptest::collection::vec(-2.0f64..2.0, 9)) {
            let m = Mat::from_vec(3, 3, entries).unwrap();
            proptest::prop_assert!(spectral_radius(&m).unwrap() <= induced_two_norm(&m) + 1e-10);
        }

        #[test]
        fn inf_and_two_norm_agree_on_diagonals(d in proptest::collection::vec(-3.0f64..3.0, 1..5)) {
            let m = Mat::from_diag(&d);
            proptest::prop_assert!((induced_inf_norm(&m) - induced_two_norm(&m)).abs() < 1e-12);
        }
    }
}
