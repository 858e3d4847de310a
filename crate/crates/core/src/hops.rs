//! Nonlinear hierarchy of pure states for a driven qubit with L = σ_z.
//!
//! Basis order is (↑, ↓) = (p, s). Each trajectory integrates
//!
//! ∂_t f⁽ᵏ⁾ = (−iH − k·w + L z̃) f⁽ᵏ⁾ + L Σ_j k_j g_j f⁽ᵏ⁻ᵉʲ⁾ − (L† − ⟨L†⟩) Σ_j f⁽ᵏ⁺ᵉʲ⁾
//!
//! with z̃ = z* + Σ_j s_j and ṡ_j = −w_j* s_j + g_j*⟨L†⟩, and ρ is the
//! ensemble mean of the normalized projectors |f̂⁽⁰⁾⟩⟨f̂⁽⁰⁾|.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::bath::DiscreteBath;
use crate::error::{Error, Result};
use crate::expfit::ExpModes;
use crate::numeric::binomial;
use crate::params::PhysicalConfig;
use crate::stochastic::{generate_spectral, path_rng};
use crate::Complex;

pub type State = [Complex; 2];
pub type Density = [[Complex; 2]; 2];

const ZERO: Complex = Complex::new(0.0, 0.0);
const NORM_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SystemModel {
    /// Ω_mw (rad/s).
    pub rabi: f64,
    /// Δ (rad/s).
    pub detuning: f64,
    pub initial: State,
}

impl SystemModel {
    pub fn new(rabi: f64, detuning: f64, initial: State) -> Result<Self> {
        let n = initial[0].norm_sqr() + initial[1].norm_sqr();
        if (n - 1.0).abs() > 1e-12 {
            return Err(Error::Invariant { field: "initial".into(), msg: format!("norm² = {n}") });
        }
        Ok(SystemModel { rabi, detuning, initial })
    }

    pub fn from_config(cfg: &PhysicalConfig) -> Result<Self> {
        Self::new(cfg.rabi, cfg.detuning, [cfg.c_up, cfg.c_down])
    }

    /// −iH f with H = (Ω/2)σ_x + (Δ/2)σ_z.
    #[inline]
    fn apply_minus_i_h(&self, f: &[Complex]) -> State {
        let (a, d) = (0.5 * self.rabi, 0.5 * self.detuning);
        let mi = Complex::new(0.0, -1.0);
        [mi * (a * f[1] + d * f[0]), mi * (a * f[0] - d * f[1])]
    }

    fn max_rate(&self) -> f64 {
        self.rabi.abs().max(self.detuning.abs())
    }
}

pub fn projector(f: &State) -> Density {
    [[f[0] * f[0].conj(), f[0] * f[1].conj()], [f[1] * f[0].conj(), f[1] * f[1].conj()]]
}

/// ρ_sp = ⟨s|ρ|p⟩.
pub fn rho_sp(rho: &Density) -> Complex {
    rho[1][0]
}

/// Triangular index set {k : Σ_j k_j ≤ D} with parent and child links.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub modes: usize,
    pub depth: usize,
    /// Ordered by level, then lexicographically descending.
    pub indices: Vec<Vec<u16>>,
    /// `lower[p][j]`: position of k − e_j.
    pub lower: Vec<Vec<Option<usize>>>,
    /// `upper[p][j]`: position of k + e_j when inside the truncation.
    pub upper: Vec<Vec<Option<usize>>>,
}

impl Hierarchy {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn hierarchy_size(m: usize, d: usize) -> u128 {
    binomial((m + d) as u64, d as u64)
}

pub fn build_hierarchy(m: usize, d: usize, cap: usize) -> Result<Hierarchy> {
    if m == 0 || d == 0 {
        return Err(Error::Domain(format!("hierarchy needs M >= 1 and D >= 1 (got M = {m}, D = {d})")));
    }
    let size = hierarchy_size(m, d);
    if size > cap as u128 {
        return Err(Error::HierarchyCap { size, cap });
    }
    let mut indices: Vec<Vec<u16>> = vec![vec![0; m]];
    let mut level_start = 0;
    for _ in 1..=d {
        let level_end = indices.len();
        let mut next: Vec<Vec<u16>> = Vec::new();
        for p in level_start..level_end {
            // Raise only at or after the last nonzero entry so each index
            // is generated exactly once.
            let first = indices[p].iter().rposition(|&k| k > 0).unwrap_or(0);
            for j in first..m {
                let mut k = indices[p].clone();
                k[j] += 1;
                next.push(k);
            }
        }
        next.sort_by(|a, b| b.cmp(a));
        level_start = level_end;
        indices.extend(next);
    }
    let pos: HashMap<&[u16], usize> = indices.iter().enumerate().map(|(i, k)| (k.as_slice(), i)).collect();
    let mut lower = vec![vec![None; m]; indices.len()];
    let mut upper = vec![vec![None; m]; indices.len()];
    for (p, k) in indices.iter().enumerate() {
        for j in 0..m {
            let mut q = k.clone();
            if q[j] > 0 {
                q[j] -= 1;
                lower[p][j] = pos.get(q.as_slice()).copied();
                q[j] += 1;
            }
            q[j] += 1;
            upper[p][j] = pos.get(q.as_slice()).copied();
        }
    }
    Ok(Hierarchy { modes: m, depth: d, indices, lower, upper })
}

/// Propagation grid shared by every trajectory of an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
    /// Integrator steps per output sample.
    pub stride: usize,
}

impl TimeGrid {
    /// Step size dt_factor / (fastest rate), shrunk so that `n_out` output
    /// intervals cover [0, tmax] exactly.
    pub fn new(model: &SystemModel, modes: &ExpModes, tmax: f64, n_out: usize, dt_factor: f64) -> Result<Self> {
        if !(tmax > 0.0) || n_out == 0 {
            return Err(Error::Domain(format!("need tmax > 0 and n_out >= 1 (tmax = {tmax})")));
        }
        let coupling = modes.modes.iter().map(|m| m.g.norm()).sum::<f64>().sqrt();
        let rate = model.max_rate().max(modes.max_rate()).max(coupling);
        let dt_max = if rate > 0.0 { dt_factor / rate } else { tmax / n_out as f64 };
        let stride = ((tmax / n_out as f64) / dt_max).ceil().max(1.0) as usize;
        let steps = stride * n_out;
        Ok(TimeGrid { dt: tmax / steps as f64, steps, stride })
    }

    pub fn n_out(&self) -> usize {
        self.steps / self.stride
    }

    pub fn output_times(&self) -> Vec<f64> {
        (0..=self.n_out()).map(|i| (i * self.stride) as f64 * self.dt).collect()
    }

    /// Noise samples needed at spacing dt/2.
    pub fn noise_len(&self) -> usize {
        2 * self.steps + 1
    }
}

/// Normalized f̂⁽⁰⁾ at the output times, plus the norms before each
/// renormalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub norms: Vec<f64>,
}

struct Kernel<'a> {
    model: &'a SystemModel,
    h: &'a Hierarchy,
    w: Vec<Complex>,
    g: Vec<Complex>,
    /// Σ_j k_j w_j per index.
    kw: Vec<Complex>,
}

impl<'a> Kernel<'a> {
    fn new(model: &'a SystemModel, modes: &ExpModes, h: &'a Hierarchy) -> Self {
        let w: Vec<Complex> = modes.modes.iter().map(|m| m.w()).collect();
        let g = modes.modes.iter().map(|m| m.g).collect();
        let kw = h
            .indices
            .iter()
            .map(|k| k.iter().zip(&w).map(|(&k, w)| *w * k as f64).sum())
            .collect();
        Kernel { model, h, w, g, kw }
    }

    /// Derivative of (f, s) given the raw noise value z*.
    fn rhs(&self, zc: Complex, f: &[Complex], s: &[Complex], df: &mut [Complex], ds: &mut [Complex]) {
        let n0 = f[0].norm_sqr() + f[1].norm_sqr();
        let l_mean = (f[0].norm_sqr() - f[1].norm_sqr()) / n0;
        let zt = zc + s.iter().sum::<Complex>();
        for (j, d) in ds.iter_mut().enumerate() {
            *d = -self.w[j].conj() * s[j] + self.g[j].conj() * l_mean;
        }
        for p in 0..self.h.len() {
            let fp = &f[2 * p..2 * p + 2];
            let hp = self.model.apply_minus_i_h(fp);
            let diag = -self.kw[p];
            let mut a = hp[0] + (diag + zt) * fp[0];
            let mut b = hp[1] + (diag - zt) * fp[1];
            let k = &self.h.indices[p];
            for j in 0..self.h.modes {
                if let Some(q) = self.h.lower[p][j] {
                    let c = self.g[j] * k[j] as f64;
                    a += c * f[2 * q];
                    b -= c * f[2 * q + 1];
                }
                if let Some(q) = self.h.upper[p][j] {
                    a -= (1.0 - l_mean) * f[2 * q];
                    b -= (-1.0 - l_mean) * f[2 * q + 1];
                }
            }
            df[2 * p] = a;
            df[2 * p + 1] = b;
        }
    }
}

/// Integrates one trajectory with classical RK4. `noise` holds z at spacing
/// dt/2 (`grid.noise_len()` samples); `None` means a noiseless run.
pub fn propagate_trajectory(
    model: &SystemModel,
    modes: &ExpModes,
    hierarchy: &Hierarchy,
    noise: Option<&[Complex]>,
    grid: &TimeGrid,
) -> Result<Trajectory> {
    if modes.len() != hierarchy.modes {
        return Err(Error::Input(format!("{} modes for a hierarchy over {}", modes.len(), hierarchy.modes)));
    }
    if let Some(z) = noise {
        if z.len() < grid.noise_len() {
            return Err(Error::Input(format!("noise has {} samples, need {}", z.len(), grid.noise_len())));
        }
    }
    let kernel = Kernel::new(model, modes, hierarchy);
    let n = 2 * hierarchy.len();
    let m = modes.len();
    let mut f = vec![ZERO; n];
    f[0] = model.initial[0];
    f[1] = model.initial[1];
    let mut s = vec![ZERO; m];
    let (mut k1, mut k2, mut k3, mut k4) = (vec![ZERO; n], vec![ZERO; n], vec![ZERO; n], vec![ZERO; n]);
    let (mut l1, mut l2, mut l3, mut l4) = (vec![ZERO; m], vec![ZERO; m], vec![ZERO; m], vec![ZERO; m]);
    let (mut ft, mut st) = (vec![ZERO; n], vec![ZERO; m]);
    let zc = |i: usize| noise.map_or(ZERO, |z| z[i].conj());
    let dt = grid.dt;

    let mut states = Vec::with_capacity(grid.n_out() + 1);
    let mut norms = Vec::with_capacity(grid.n_out() + 1);
    states.push(model.initial);
    norms.push(1.0);
    for step in 0..grid.steps {
        let (z0, zh, z1) = (zc(2 * step), zc(2 * step + 1), zc(2 * step + 2));
        kernel.rhs(z0, &f, &s, &mut k1, &mut l1);
        axpy(&mut ft, &f, 0.5 * dt, &k1);
        axpy(&mut st, &s, 0.5 * dt, &l1);
        kernel.rhs(zh, &ft, &st, &mut k2, &mut l2);
        axpy(&mut ft, &f, 0.5 * dt, &k2);
        axpy(&mut st, &s, 0.5 * dt, &l2);
        kernel.rhs(zh, &ft, &st, &mut k3, &mut l3);
        axpy(&mut ft, &f, dt, &k3);
        axpy(&mut st, &s, dt, &l3);
        kernel.rhs(z1, &ft, &st, &mut k4, &mut l4);
        let c = dt / 6.0;
        for i in 0..n {
            f[i] += c * (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]);
        }
        for j in 0..m {
            s[j] += c * (l1[j] + 2.0 * (l2[j] + l3[j]) + l4[j]);
        }
        if (step + 1) % grid.stride == 0 {
            let norm = (f[0].norm_sqr() + f[1].norm_sqr()).sqrt();
            if !norm.is_finite() || norm > NORM_LIMIT || norm == 0.0 {
                return Err(Error::Rejected(format!(
                    "|f0| = {norm:.3e} at t = {:.4e} s",
                    (step + 1) as f64 * dt
                )));
            }
            let inv = 1.0 / norm;
            f.iter_mut().for_each(|x| *x *= inv);
            states.push([f[0], f[1]]);
            norms.push(norm);
        }
    }
    Ok(Trajectory { states, norms })
}

fn axpy(out: &mut [Complex], x: &[Complex], a: f64, y: &[Complex]) {
    for ((o, x), y) in out.iter_mut().zip(x).zip(y) {
        *o = x + a * y;
    }
}

/// Where trajectory noise comes from.
#[derive(Debug, Clone, Copy)]
pub enum NoiseSource<'a> {
    /// Closed-system runs.
    None,
    /// Spectral noise on these (pruned, alias-checked) bath components.
    Spectral(&'a DiscreteBath),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnsembleSettings {
    pub ntraj: usize,
    pub seed: u64,
    pub depth: usize,
    pub hierarchy_cap: usize,
    pub max_rejection: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleResult {
    pub t: Vec<f64>,
    pub rho: Vec<Density>,
    /// Standard error of each element of ρ.
    pub se: Vec<[[f64; 2]; 2]>,
    pub ntraj: usize,
    pub rejected: usize,
    pub seed: u64,
    pub grid: TimeGrid,
    pub depth: usize,
    /// Trajectory stream numbers that contributed, in order.
    #[serde(skip)]
    pub streams: Vec<u64>,
    /// Normalized f̂⁽⁰⁾ per accepted trajectory.
    #[serde(skip)]
    pub states: Vec<Vec<State>>,
}

impl EnsembleResult {
    pub fn rejection_rate(&self) -> f64 {
        self.rejected as f64 / self.ntraj as f64
    }

    /// |ρ_sp(t)|/|ρ_sp(0)|.
    pub fn coherence(&self) -> Vec<f64> {
        let c0 = rho_sp(&self.rho[0]).norm();
        self.rho.iter().map(|r| rho_sp(r).norm() / c0).collect()
    }
}

/// One trajectory for stream `index` of `seed`.
pub fn run_trajectory(
    model: &SystemModel,
    modes: &ExpModes,
    hierarchy: &Hierarchy,
    noise: NoiseSource,
    grid: &TimeGrid,
    seed: u64,
    index: u64,
) -> Result<Trajectory> {
    match noise {
        NoiseSource::None => propagate_trajectory(model, modes, hierarchy, None, grid),
        NoiseSource::Spectral(bath) => {
            let path = generate_spectral(bath, 0.5 * grid.dt, grid.noise_len(), seed, index);
            propagate_trajectory(model, modes, hierarchy, Some(&path.z), grid)
        }
    }
}

/// Sums `items` by pairwise halving so the result does not depend on how
/// the work was scheduled.
fn tree_sum<T: Clone>(items: &[T], add: &impl Fn(&T, &T) -> T) -> Option<T> {
    match items.len() {
        0 => None,
        1 => Some(items[0].clone()),
        n => {
            let (a, b) = items.split_at(n / 2);
            Some(add(&tree_sum(a, add)?, &tree_sum(b, add)?))
        }
    }
}

#[derive(Clone)]
struct Moments {
    sum: Vec<Density>,
    sq: Vec<[[f64; 2]; 2]>,
}

pub fn ensemble_average(
    model: &SystemModel,
    modes: &ExpModes,
    noise: NoiseSource,
    grid: &TimeGrid,
    settings: &EnsembleSettings,
) -> Result<EnsembleResult> {
    if settings.ntraj == 0 {
        return Err(Error::Domain("need at least one trajectory".into()));
    }
    let hierarchy = build_hierarchy(modes.len().max(1), settings.depth, settings.hierarchy_cap)?;
    let padded;
    let modes = if modes.is_empty() {
        padded = ExpModes {
            modes: vec![crate::expfit::ExpMode { g: ZERO, omega: 0.0, gamma: 1.0 }],
            residual: 0.0,
            reflected: false,
        };
        &padded
    } else {
        modes
    };
    let runs: Vec<(u64, Result<Trajectory>)> = (0..settings.ntraj as u64)
        .into_par_iter()
        .map(|i| (i, run_trajectory(model, modes, &hierarchy, noise, grid, settings.seed, i)))
        .collect();
    let mut streams = Vec::with_capacity(runs.len());
    let mut states = Vec::with_capacity(runs.len());
    let mut rejected = 0;
    let mut first_error = None;
    for (i, r) in runs {
        match r {
            Ok(tr) => {
                streams.push(i);
                states.push(tr.states);
            }
            Err(Error::Rejected(msg)) => {
                rejected += 1;
                first_error.get_or_insert(format!("trajectory {i}: {msg}"));
            }
            Err(e) => return Err(e),
        }
    }
    let rate = rejected as f64 / settings.ntraj as f64;
    if rate > settings.max_rejection || states.is_empty() {
        return Err(Error::Unstable(format!(
            "{rejected} of {} trajectories rejected ({}); parameters unstable",
            settings.ntraj,
            first_error.unwrap_or_default()
        )));
    }
    let (rho, se) = density_moments(&states);
    Ok(EnsembleResult {
        t: grid.output_times(),
        rho,
        se,
        ntraj: settings.ntraj,
        rejected,
        seed: settings.seed,
        grid: *grid,
        depth: settings.depth,
        streams,
        states,
    })
}

/// Mean projector and per-element standard errors over trajectories.
fn density_moments(states: &[Vec<State>]) -> (Vec<Density>, Vec<[[f64; 2]; 2]>) {
    let per: Vec<Moments> = states
        .par_iter()
        .map(|tr| {
            let sum: Vec<Density> = tr.iter().map(projector).collect();
            let sq = sum.iter().map(|r| std::array::from_fn(|a| std::array::from_fn(|b| r[a][b].norm_sqr()))).collect();
            Moments { sum, sq }
        })
        .collect();
    let total = tree_sum(&per, &|a: &Moments, b: &Moments| Moments {
        sum: a.sum.iter().zip(&b.sum).map(|(x, y)| std::array::from_fn(|i| std::array::from_fn(|j| x[i][j] + y[i][j]))).collect(),
        sq: a.sq.iter().zip(&b.sq).map(|(x, y)| std::array::from_fn(|i| std::array::from_fn(|j| x[i][j] + y[i][j]))).collect(),
    })
    .expect("non-empty");
    let n = states.len() as f64;
    let rho: Vec<Density> = total.sum.iter().map(|s| std::array::from_fn(|i| std::array::from_fn(|j| s[i][j] / n))).collect();
    let se = total
        .sq
        .iter()
        .zip(&rho)
        .map(|(q, m)| {
            std::array::from_fn(|i| {
                std::array::from_fn(|j| {
                    if n < 2.0 {
                        0.0
                    } else {
                        ((q[i][j] - n * m[i][j].norm_sqr()).max(0.0) / (n - 1.0) / n).sqrt()
                    }
                })
            })
        })
        .collect();
    (rho, se)
}

/// ½ Σ|λ(ρ1 − ρ2)|.
pub fn trace_distance(a: &Density, b: &Density) -> Result<f64> {
    for r in [a, b] {
        let herm = (r[0][1] - r[1][0].conj()).norm().max(r[0][0].im.abs()).max(r[1][1].im.abs());
        if herm > 1e-8 {
            return Err(Error::Input(format!("density matrix not Hermitian (deviation {herm:.2e})")));
        }
    }
    let d00 = a[0][0].re - b[0][0].re;
    let d11 = a[1][1].re - b[1][1].re;
    let off = a[1][0] - b[1][0];
    let mean = 0.5 * (d00 + d11);
    let radius = (0.25 * (d00 - d11).powi(2) + off.norm_sqr()).sqrt();
    Ok(0.5 * ((mean + radius).abs() + (mean - radius).abs()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TauFit {
    pub tau: f64,
    pub rms: f64,
    /// Samples used, starting at t = 0.
    pub window: usize,
    /// False when the series never decays in the window.
    pub bounded: bool,
}

/// Fits y(0) exp[−(t/τ)²] over [0, first 1/e crossing or first local
/// minimum].
pub fn fit_tau(t: &[f64], y: &[f64]) -> Result<TauFit> {
    if t.len() != y.len() || t.len() < 3 {
        return Err(Error::Input("fit_tau needs matching series of at least 3 samples".into()));
    }
    let y0 = y[0];
    if !(y0 > 0.0) {
        return Err(Error::Domain("series must start positive".into()));
    }
    let target = y0 / std::f64::consts::E;
    let cross = y.iter().position(|&v| v < target);
    let minimum = (1..y.len() - 1).find(|&i| y[i] < y[i - 1] && y[i] <= y[i + 1]);
    let (end, bounded) = match (cross, minimum) {
        (Some(c), Some(m)) => (c.min(m), true),
        (Some(c), None) => (c, true),
        (None, Some(m)) => (m, true),
        (None, None) => (y.len() - 1, false),
    };
    let end = end.max(2);
    let (ts, ys) = (&t[..=end], &y[..=end]);
    let sse = |tau: f64| -> f64 { ts.iter().zip(ys).map(|(t, y)| (y - y0 * (-(t / tau).powi(2)).exp()).powi(2)).sum() };
    // Linearized start: ln(y/y0) = −t²/τ².
    let (mut num, mut den) = (0.0, 0.0);
    for (t, y) in ts.iter().zip(ys).skip(1) {
        if *y > 0.0 {
            let l = -(y / y0).ln();
            num += t.powi(4);
            den += t * t * l;
        }
    }
    let tau0 = if den > 0.0 { (num / den).sqrt() } else { 10.0 * ts[end] };
    // Golden section on ln τ.
    let (mut lo, mut hi) = ((tau0 / 4.0).ln(), (tau0 * 4.0).ln());
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let (mut x1, mut x2) = (hi - r * (hi - lo), lo + r * (hi - lo));
    let (mut f1, mut f2) = (sse(x1.exp()), sse(x2.exp()));
    while hi - lo > 1e-12 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = sse(x1.exp());
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = sse(x2.exp());
        }
    }
    let tau = (0.5 * (lo + hi)).exp();
    Ok(TauFit { tau, rms: (sse(tau) / ts.len() as f64).sqrt(), window: end + 1, bounded })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonMarkovianity {
    pub value: f64,
    /// Bootstrap standard error of `value`.
    pub se: f64,
    pub inconclusive: bool,
    /// Trace distance and its standard error per output time.
    pub distance: Vec<f64>,
    pub distance_se: Vec<f64>,
}

fn bloch(f: &State) -> [f64; 3] {
    let c = f[1].conj() * f[0];
    [2.0 * c.re, 2.0 * c.im, f[0].norm_sqr() - f[1].norm_sqr()]
}

/// Per-trajectory Bloch differences d_i(t) of two common-noise ensembles.
fn bloch_differences(a: &EnsembleResult, b: &EnsembleResult) -> Result<Vec<Vec<[f64; 3]>>> {
    if a.streams != b.streams || a.t != b.t {
        return Err(Error::Precondition("the two ensembles must share seeds, streams and grids".into()));
    }
    Ok(a.states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| {
                    let (u, v) = (bloch(p), bloch(q));
                    [u[0] - v[0], u[1] - v[1], u[2] - v[2]]
                })
                .collect()
        })
        .collect())
}

struct NmEstimate {
    value: f64,
    distance: Vec<f64>,
    distance_se: Vec<f64>,
}

fn estimate_nm(d: &[Vec<[f64; 3]>], pick: &[usize]) -> NmEstimate {
    let n = pick.len() as f64;
    let nt = d[0].len();
    let mean: Vec<[f64; 3]> = (0..nt)
        .map(|t| {
            let mut m = [0.0; 3];
            for &i in pick {
                for c in 0..3 {
                    m[c] += d[i][t][c];
                }
            }
            m.map(|x| x / n)
        })
        .collect();
    let norm = |v: &[f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let unit: Vec<[f64; 3]> = mean
        .iter()
        .map(|m| {
            let l = norm(m);
            if l > 0.0 {
                m.map(|x| x / l)
            } else {
                [0.0; 3]
            }
        })
        .collect();
    let distance: Vec<f64> = mean.iter().map(|m| 0.5 * norm(m)).collect();
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    // Delta method: D ≈ ½ m̂·d̄, so SE follows from the spread of ½ m̂·d_i.
    let se_of = |u: &dyn Fn(usize) -> f64| -> f64 {
        if pick.len() < 2 {
            return 0.0;
        }
        let vals: Vec<f64> = pick.iter().map(|&i| u(i)).collect();
        let mu = vals.iter().sum::<f64>() / n;
        (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    };
    let distance_se: Vec<f64> = (0..nt).map(|t| se_of(&|i| 0.5 * dot(&unit[t], &d[i][t]))).collect();
    let mut value = 0.0;
    for t in 0..nt.saturating_sub(1) {
        let inc = distance[t + 1] - distance[t];
        if inc <= 0.0 {
            continue;
        }
        let se = se_of(&|i| 0.5 * (dot(&unit[t + 1], &d[i][t + 1]) - dot(&unit[t], &d[i][t])));
        value += (inc - 2.0 * se).max(0.0);
    }
    NmEstimate { value, distance, distance_se }
}

pub const BOOTSTRAP_SAMPLES: usize = 200;

/// Accumulated increase of the trace distance between two ensembles that
/// share noise, net of a 2·SE floor per interval, with a bootstrap SE.
pub fn non_markovianity(a: &EnsembleResult, b: &EnsembleResult, seed: u64) -> Result<NonMarkovianity> {
    let d = bloch_differences(a, b)?;
    let all: Vec<usize> = (0..d.len()).collect();
    let est = estimate_nm(&d, &all);
    let boots: Vec<f64> = (0..BOOTSTRAP_SAMPLES as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = path_rng(seed ^ 0x6e6d_626f_6f74, k);
            let pick: Vec<usize> = (0..d.len()).map(|_| rng.gen_range(0..d.len())).collect();
            estimate_nm(&d, &pick).value
        })
        .collect();
    let mu = boots.iter().sum::<f64>() / boots.len() as f64;
    let se = (boots.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (boots.len() - 1) as f64).sqrt();
    let dmax = est.distance.iter().cloned().fold(0.0, f64::max);
    let semax = est.distance_se.iter().cloned().fold(0.0, f64::max);
    Ok(NonMarkovianity {
        value: est.value,
        se,
        inconclusive: semax > 0.2 * dmax,
        distance: est.distance,
        distance_se: est.distance_se,
    })
}

/// Initial pair |s⟩⟨s|, |p⟩⟨p| used for 𝒩.
pub fn nm_initial_pair() -> (State, State) {
    let one = Complex::new(1.0, 0.0);
    ([ZERO, one], [one, ZERO])
}

#[derive(Debug, Clone, Serialize)]
pub struct DepthConvergence {
    pub depth: usize,
    /// Sup-norm change of the coherence curve from `depth` to `depth + 1`.
    pub change: f64,
    pub converged: bool,
}

/// Raises D from `settings.depth` until the coherence curve moves by less
/// than `tol` (sup-norm) from D to D+1, or `max_depth` is reached. Returns
/// the run at the accepted depth.
pub fn converge_depth(
    model: &SystemModel,
    modes: &ExpModes,
    noise: NoiseSource,
    grid: &TimeGrid,
    settings: &EnsembleSettings,
    max_depth: usize,
    tol: f64,
) -> Result<(EnsembleResult, DepthConvergence)> {
    let mut s = *settings;
    let mut current = ensemble_average(model, modes, noise, grid, &s)?;
    loop {
        s.depth += 1;
        let next = ensemble_average(model, modes, noise, grid, &s)?;
        let change = sup_diff(&current.coherence(), &next.coherence());
        let converged = change < tol;
        if converged || s.depth >= max_depth {
            let depth = current.depth;
            return Ok((current, DepthConvergence { depth, change, converged }));
        }
        current = next;
    }
}

pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfit::ExpMode;

    fn zero_modes(m: usize) -> ExpModes {
        ExpModes { modes: vec![ExpMode { g: ZERO, omega: 0.0, gamma: 1.0 }; m], residual: 0.0, reflected: false }
    }

    fn plus() -> State {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        [Complex::new(h, 0.0), Complex::new(h, 0.0)]
    }

    #[test]
    fn hierarchy_sizes_and_closure() {
        let h = build_hierarchy(1, 3, 1000).unwrap();
        assert_eq!(h.indices, vec![vec![0], vec![1], vec![2], vec![3]]);
        let h = build_hierarchy(4, 4, 1000).unwrap();
        assert_eq!(h.len(), 70);
        for (p, k) in h.indices.iter().enumerate() {
            for j in 0..4 {
                assert_eq!(h.lower[p][j].is_some(), k[j] > 0);
                if let Some(q) = h.upper[p][j] {
                    assert_eq!(h.lower[q][j], Some(p));
                }
            }
        }
        assert!(matches!(build_hierarchy(12, 8, 1000), Err(Error::HierarchyCap { size: 125970, .. })));
        assert!(build_hierarchy(0, 3, 10).is_err());
    }

    #[test]
    fn closed_system_precession() {
        let det = 2.0e6;
        let model = SystemModel::new(0.0, det, plus()).unwrap();
        let modes = zero_modes(2);
        let h = build_hierarchy(2, 2, 100).unwrap();
        let grid = TimeGrid::new(&model, &modes, 5e-6, 100, 0.01).unwrap();
        let tr = propagate_trajectory(&model, &modes, &h, None, &grid).unwrap();
        for (t, f) in grid.output_times().iter().zip(&tr.states) {
            let rho = projector(f);
            assert!((rho_sp(&rho).norm() - 0.5).abs() < 1e-10);
            let expect = Complex::new(0.0, det * t).exp() * 0.5;
            assert!((rho_sp(&rho) - expect).norm() < 1e-8);
        }
    }

    #[test]
    fn closed_system_rabi() {
        let rabi = 1.0e6;
        let up = [Complex::new(1.0, 0.0), ZERO];
        let model = SystemModel::new(rabi, 0.0, up).unwrap();
        let modes = zero_modes(1);
        let h = build_hierarchy(1, 1, 100).unwrap();
        let period = 2.0 * std::f64::consts::PI / rabi;
        let grid = TimeGrid::new(&model, &modes, 10.0 * period, 400, 0.01).unwrap();
        let tr = propagate_trajectory(&model, &modes, &h, None, &grid).unwrap();
        for (t, f) in grid.output_times().iter().zip(&tr.states) {
            let expect = (0.5 * rabi * t).cos().powi(2);
            assert!((f[0].norm_sqr() - expect).abs() < 1e-8, "t = {t}");
        }
    }

    #[test]
    fn trace_distance_cases() {
        let (s, p) = nm_initial_pair();
        let (rs, rp) = (projector(&s), projector(&p));
        assert!(trace_distance(&rs, &rs).unwrap().abs() < 1e-15);
        assert!((trace_distance(&rs, &rp).unwrap() - 1.0).abs() < 1e-15);
        let mut bad = rs;
        bad[0][1] = Complex::new(0.1, 0.0);
        assert!(trace_distance(&bad, &rp).is_err());
    }

    #[test]
    fn gaussian_fit_recovers_tau() {
        let t: Vec<f64> = (0..200).map(|i| i as f64 * 2e-8).collect();
        let y: Vec<f64> = t.iter().map(|t| 0.5 * (-(t / 1e-6).powi(2)).exp()).collect();
        let fit = fit_tau(&t, &y).unwrap();
        assert!((fit.tau - 1e-6).abs() < 1e-12, "{}", fit.tau);
        assert!(fit.bounded);
        let flat = vec![1.0; 200];
        assert!(!fit_tau(&t, &flat).unwrap().bounded);
    }

    #[test]
    fn single_noiseless_trajectory_is_pure() {
        let model = SystemModel::new(1e6, 3e5, plus()).unwrap();
        let modes = zero_modes(1);
        let grid = TimeGrid::new(&model, &modes, 1e-6, 20, 0.01).unwrap();
        let settings = EnsembleSettings { ntraj: 1, seed: 1, depth: 1, hierarchy_cap: 100, max_rejection: 0.01 };
        let r = ensemble_average(&model, &modes, NoiseSource::None, &grid, &settings).unwrap();
        for rho in &r.rho {
            let det = rho[0][0].re * rho[1][1].re - rho[0][1].norm_sqr();
            assert!(det.abs() < 1e-12);
            assert!(((rho[0][0] + rho[1][1]).re - 1.0).abs() < 1e-12);
        }
    }
}
