//! Sum-of-exponentials representation C(τ) ≈ Σ_j g_j e^{−(iΩ_j + γ_j)τ}.
//!
//! Fitting runs in scaled units (τ in samples, C in units of C(0)). Poles
//! come from the matrix pencil of the Hankel matrix, amplitudes from linear
//! least squares, and a Levenberg–Marquardt pass refines the poles with the
//! amplitudes projected out (variable projection).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bath::{memory_time, CorrelationTable};
use crate::error::{Error, Result};
use crate::Complex;

/// One damped mode g e^{−(iΩ + γ)τ}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct ExpMode {
    /// Amplitude g (s⁻²).
    pub g: Complex,
    /// Frequency Ω (rad/s).
    pub omega: f64,
    /// Damping γ (1/s).
    pub gamma: f64,
}

impl ExpMode {
    /// w = iΩ + γ.
    pub fn w(&self) -> Complex {
        Complex::new(self.gamma, self.omega)
    }
}

impl From<ExpMode> for [f64; 4] {
    fn from(m: ExpMode) -> Self {
        [m.g.re, m.g.im, m.omega, m.gamma]
    }
}

impl From<[f64; 4]> for ExpMode {
    fn from(a: [f64; 4]) -> Self {
        Self { g: Complex::new(a[0], a[1]), omega: a[2], gamma: a[3] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModesJson", try_from = "ModesJson")]
pub struct ExpModes {
    pub modes: Vec<ExpMode>,
    /// ‖C_fit − C‖₂/‖C‖₂ on the fitted table.
    pub residual: f64,
    /// Set when an unstable pole was reflected into the left half plane.
    pub reflected: bool,
}

#[derive(Serialize, Deserialize)]
struct ModesJson {
    #[serde(rename = "M")]
    m: usize,
    modes: Vec<ExpMode>,
    residual: f64,
    #[serde(default)]
    reflected: bool,
}

impl From<ExpModes> for ModesJson {
    fn from(e: ExpModes) -> Self {
        Self { m: e.modes.len(), modes: e.modes, residual: e.residual, reflected: e.reflected }
    }
}

impl TryFrom<ModesJson> for ExpModes {
    type Error = String;
    fn try_from(j: ModesJson) -> std::result::Result<Self, String> {
        if j.m != j.modes.len() {
            return Err(format!("M = {} but {} modes listed", j.m, j.modes.len()));
        }
        if let Some(m) = j.modes.iter().find(|m| !(m.gamma > 0.0)) {
            return Err(format!("mode with non-positive damping {}", m.gamma));
        }
        Ok(Self { modes: j.modes, residual: j.residual, reflected: j.reflected })
    }
}

impl ExpModes {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// C_fit(τ), extended to τ < 0 by Hermitian symmetry.
    pub fn evaluate(&self, tau: f64) -> Complex {
        let c: Complex = self.modes.iter().map(|m| m.g * (-m.w() * tau.abs()).exp()).sum();
        if tau < 0.0 {
            c.conj()
        } else {
            c
        }
    }

    /// Fastest rate max(γ_j, |Ω_j|).
    pub fn max_rate(&self) -> f64 {
        self.modes.iter().map(|m| m.gamma.max(m.omega.abs())).fold(0.0, f64::max)
    }

    /// True when every g_j is real and non-negative.
    pub fn has_real_nonnegative_amplitudes(&self) -> bool {
        self.modes.iter().all(|m| m.g.im == 0.0 && m.g.re >= 0.0)
    }
}

/// Evaluates the modes on τ_i = i dτ.
pub fn evaluate_modes(modes: &ExpModes, dtau: f64, n: usize) -> CorrelationTable {
    CorrelationTable { dtau, values: (0..n).map(|i| modes.evaluate(i as f64 * dtau)).collect() }
}

/// Singular value ratio below which Hankel directions are discarded.
const RANK_TOL: f64 = 1e-10;

type CMat = DMatrix<Complex>;

/// Signal subspace of the Hankel matrix built from `y`, reusable across M.
struct Pencil {
    /// Leading right singular vectors, transposed without conjugation.
    v: CMat,
    rank: usize,
    l: usize,
}

impl Pencil {
    /// Hankel matrix with pencil parameter `l` (clamped to the data).
    fn new(y: &[Complex], l: usize, keep: usize) -> Self {
        let n = y.len();
        let l = l.max(keep).min(n - keep - 1).max(1);
        let hankel = CMat::from_fn(n - l, l + 1, |i, j| y[i + j]);
        let svd = hankel.svd(false, true);
        let s = &svd.singular_values;
        let rank = s.iter().take_while(|&&v| v > RANK_TOL * s[0]).count();
        let vt = svd.v_t.expect("requested V^T");
        let keep = keep.min(vt.nrows());
        Pencil { v: vt.rows(0, keep).transpose(), rank, l }
    }

    /// Poles z_j = e^{−w_j} (one sample per unit time) for `m` modes.
    fn poles(&self, m: usize) -> Vec<Complex> {
        let m = m.min(self.rank).min(self.v.ncols()).max(1);
        let v = self.v.columns(0, m);
        let v1 = v.rows(0, self.l).into_owned();
        let v2 = v.rows(1, self.l).into_owned();
        let pinv = v1.pseudo_inverse(1e-14).expect("pseudo inverse");
        let a = pinv * v2;
        a.schur().eigenvalues().map(|e| e.iter().cloned().collect()).unwrap_or_default()
    }
}

/// Pencil parameter for the warm-start pole of a residual; only a rough
/// estimate is needed there.
const RESIDUAL_PENCIL: usize = 64;

/// Least-squares amplitudes for fixed rates `w` (scaled units).
fn amplitudes(y: &[Complex], w: &[Complex]) -> Vec<Complex> {
    let mut phi = CMat::zeros(y.len(), w.len());
    for (j, w) in w.iter().enumerate() {
        let z = (-w).exp();
        let mut p = Complex::new(1.0, 0.0);
        for k in 0..y.len() {
            phi[(k, j)] = p;
            p *= z;
        }
    }
    let rhs = DVector::from_column_slice(y);
    let svd = phi.svd(true, true);
    match svd.solve(&rhs, 1e-14) {
        Ok(g) => g.iter().cloned().collect(),
        Err(_) => vec![Complex::new(0.0, 0.0); w.len()],
    }
}

fn residual_vec(y: &[Complex], w: &[Complex], g: &[Complex]) -> Vec<Complex> {
    let mut out = y.to_vec();
    for (w, g) in w.iter().zip(g) {
        let z = (-w).exp();
        let mut p = *g;
        for o in out.iter_mut() {
            *o -= p;
            p *= z;
        }
    }
    out
}

fn norm2(v: &[Complex]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

/// Parameters θ = (ln γ_1..M, Ω_1..M) to rates w = γ + iΩ.
fn rates(theta: &[f64]) -> Vec<Complex> {
    let m = theta.len() / 2;
    (0..m).map(|j| Complex::new(theta[j].exp(), theta[m + j])).collect()
}

fn projected_residual(y: &[Complex], theta: &[f64]) -> Vec<f64> {
    let w = rates(theta);
    let g = amplitudes(y, &w);
    residual_vec(y, &w, &g).iter().flat_map(|c| [c.re, c.im]).collect()
}

/// Levenberg–Marquardt on the projected residual.
fn refine(y: &[Complex], mut theta: Vec<f64>) -> Vec<f64> {
    let p = theta.len();
    let mut r = projected_residual(y, &theta);
    let mut cost: f64 = r.iter().map(|v| v * v).sum();
    let mut lambda = 1e-3;
    for _ in 0..300 {
        let nr = r.len();
        let mut jac = DMatrix::<f64>::zeros(nr, p);
        for k in 0..p {
            let h = 1e-7 * theta[k].abs().max(1e-3);
            let mut tp = theta.clone();
            tp[k] += h;
            let rp = projected_residual(y, &tp);
            for i in 0..nr {
                jac[(i, k)] = (rp[i] - r[i]) / h;
            }
        }
        let jt = jac.transpose();
        let jtj = &jt * &jac;
        let grad = &jt * DVector::from_column_slice(&r);
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..p {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-&grad)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            let rt = projected_residual(y, &trial);
            let ct: f64 = rt.iter().map(|v| v * v).sum();
            if ct.is_finite() && ct < cost {
                let rel = (cost - ct) / cost.max(1e-300);
                theta = trial;
                r = rt;
                cost = ct;
                lambda = (lambda * 0.3).max(1e-12);
                improved = rel > 1e-12;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    theta
}

struct Scaled {
    y: Vec<Complex>,
    c0: f64,
    dtau: f64,
}

fn scaled(table: &CorrelationTable) -> Result<Scaled> {
    let c0 = table.values.first().map(|c| c.norm()).unwrap_or(0.0);
    if !(c0 > 0.0) {
        return Err(Error::Domain("correlation table has C(0) = 0".into()));
    }
    Ok(Scaled { y: table.values.iter().map(|c| c / c0).collect(), c0, dtau: table.dtau })
}

fn theta_from_rates(w: &[Complex]) -> (Vec<f64>, bool) {
    let m = w.len();
    let mut theta = vec![0.0; 2 * m];
    let mut reflected = false;
    for (j, w) in w.iter().enumerate() {
        let mut g = w.re;
        if g <= 0.0 {
            reflected = true;
            g = g.abs().max(1e-6);
        }
        theta[j] = g.ln();
        theta[m + j] = w.im;
    }
    (theta, reflected)
}

fn to_modes(s: &Scaled, theta: &[f64], reflected: bool) -> ExpModes {
    let w = rates(theta);
    let g = amplitudes(&s.y, &w);
    let res = norm2(&residual_vec(&s.y, &w, &g)) / norm2(&s.y);
    let mut modes: Vec<ExpMode> = w
        .iter()
        .zip(&g)
        .map(|(w, g)| ExpMode { g: g * s.c0, omega: w.im / s.dtau, gamma: w.re / s.dtau })
        .collect();
    modes.sort_by(|a, b| a.gamma.total_cmp(&b.gamma).then(a.omega.total_cmp(&b.omega)));
    ExpModes { modes, residual: res, reflected }
}

fn fit_scaled(s: &Scaled, pencil: &Pencil, m: usize, warm: Option<&ExpModes>) -> ExpModes {
    let z = pencil.poles(m);
    let w: Vec<Complex> = z.iter().map(|z| -z.ln()).collect();
    let (theta, reflected) = theta_from_rates(&w);
    let mut best = to_modes(s, &refine(&s.y, theta), reflected);
    if let Some(prev) = warm {
        // Previous modes plus one new pole taken from the residual.
        let mut w: Vec<Complex> = prev.modes.iter().map(|m| m.w() * s.dtau).collect();
        let g: Vec<Complex> = prev.modes.iter().map(|m| m.g / s.c0).collect();
        let rest = residual_vec(&s.y, &w, &g);
        let extra = Pencil::new(&rest, RESIDUAL_PENCIL.min(rest.len() / 3), 1)
            .poles(1)
            .first().map(|z| -z.ln()).unwrap_or(Complex::new(0.1, 0.0));
        w.push(extra);
        let (theta, refl) = theta_from_rates(&w);
        let cand = to_modes(s, &refine(&s.y, theta), refl || prev.reflected);
        if cand.residual < best.residual {
            best = cand;
        }
        if prev.residual < best.residual {
            // Keep the previous solution with a zero-amplitude extra mode so the
            // sequence is monotone.
            let mut keep = prev.clone();
            let gamma = keep.modes.iter().map(|m| m.gamma).fold(0.0, f64::max);
            keep.modes.push(ExpMode { g: Complex::new(0.0, 0.0), omega: 0.0, gamma });
            best = keep;
        }
    }
    best
}

fn check_table(table: &CorrelationTable, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::Domain("mode count must be >= 1".into()));
    }
    if table.len() < 3 * m + 2 {
        return Err(Error::Precondition(format!("{} samples cannot determine {m} modes", table.len())));
    }
    let tm = memory_time(table);
    let span = table.tau(table.len() - 1);
    if !tm.bounded || span < 3.0 * tm.value * (1.0 - 1e-9) {
        return Err(Error::Precondition(format!(
            "table spans {span:.3e} s, less than 3 envelope decay times ({:.3e} s)",
            tm.value
        )));
    }
    Ok(())
}

/// Fits exactly `m` modes.
pub fn fit_fixed(table: &CorrelationTable, m: usize) -> Result<ExpModes> {
    check_table(table, m)?;
    let s = scaled(table)?;
    let pencil = Pencil::new(&s.y, s.y.len() / 3, m);
    Ok(fit_scaled(&s, &pencil, m, None))
}

/// Fits M = 1, 2, … modes until the residual is within `tolerance`; each
/// step is warm-started from the previous one so the residual never grows.
///
/// Returns [`Error::FitFailure`] with the best modes if `m_max` is reached.
pub fn fit_exponentials(table: &CorrelationTable, m_max: usize, tolerance: f64) -> Result<ExpModes> {
    Ok(fit_sequence(table, m_max, tolerance)?.pop().expect("at least one fit"))
}

/// All fits of the growing-M sequence, stopping at the first that meets
/// `tolerance` (or failing at `m_max`).
pub fn fit_sequence(table: &CorrelationTable, m_max: usize, tolerance: f64) -> Result<Vec<ExpModes>> {
    check_table(table, m_max.max(1))?;
    let s = scaled(table)?;
    let pencil = Pencil::new(&s.y, s.y.len() / 3, m_max);
    let mut out: Vec<ExpModes> = Vec::new();
    for m in 1..=m_max {
        let fit = fit_scaled(&s, &pencil, m, out.last());
        let done = fit.residual <= tolerance;
        out.push(fit);
        if done {
            return Ok(out);
        }
    }
    let best = out.last().cloned().expect("m_max >= 1");
    Err(Error::FitFailure { residual: best.residual, tolerance, m: m_max, best: Box::new(best) })
}
