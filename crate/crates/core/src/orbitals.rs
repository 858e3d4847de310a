//! Rydberg electron radial wavefunctions and the multipole decomposition of
//! their probability densities.
//!
//! The solver works in atomic units internally: it integrates the pure Coulomb
//! radial equation at the quantum-defect-shifted energy E = −1/(2ν*²) inward
//! with Numerov's method on a logarithmic grid. Lengths are converted to SI at
//! the [`OrbitalDensity`] boundary.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{simpson_weights, trapezoid_weights};
use crate::params::BOHR_RADIUS;

/// Inner cutoff of the radial grid (a₀). Numerov is inaccurate at the
/// Coulomb singularity and the core region carries negligible weight.
pub const R_MIN_AU: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RydbergState {
    pub nu: u32,
    pub l: u32,
    pub m: i32,
    pub defect: f64,
}

impl RydbergState {
    pub fn new(nu: u32, l: u32, m: i32, defect: f64) -> Result<Self> {
        if l >= nu {
            return Err(Error::Domain(format!("l = {l} must be below nu = {nu}")));
        }
        if !(defect >= 0.0 && defect < nu as f64) {
            return Err(Error::Domain(format!("quantum defect {defect} must be in [0, {nu})")));
        }
        if l > 1 || m != 0 {
            return Err(Error::Unsupported(format!("(l, m) = ({l}, {m}); only l ∈ {{0, 1}}, m = 0")));
        }
        Ok(Self { nu, l, m, defect })
    }

    /// |s⟩ = |ν, l=0⟩.
    pub fn s(nu: u32, defect: f64) -> Result<Self> {
        Self::new(nu, 0, 0, defect)
    }

    /// |p⟩ = |ν, l=1, m=0⟩.
    pub fn p(nu: u32, defect: f64) -> Result<Self> {
        Self::new(nu, 1, 0, defect)
    }

    pub fn nu_star(&self) -> f64 {
        self.nu as f64 - self.defect
    }
}

/// Logarithmic radial grid in atomic units, r_i = exp(x_i).
#[derive(Debug, Clone)]
pub struct RadialGrid {
    pub r: Vec<f64>,
    pub h: f64,
}

impl RadialGrid {
    pub fn log(r_min: f64, r_max: f64, n: usize) -> Self {
        let (a, b) = (r_min.ln(), r_max.ln());
        let h = (b - a) / (n - 1) as f64;
        let r = (0..n).map(|i| (a + h * i as f64).exp()).collect();
        Self { r, h }
    }

    /// Default grid for `state`: 3.5 ν*² a₀, widened for low ν so the
    /// classically forbidden tail always spans ~25 ν* beyond the turning point.
    pub fn for_state(state: &RydbergState, n: usize) -> Self {
        let ns = state.nu_star();
        let r_max = (3.5 * ns * ns).max(2.0 * ns * ns + 25.0 * ns);
        Self::log(R_MIN_AU, r_max, n)
    }

    pub fn r_max(&self) -> f64 {
        *self.r.last().unwrap()
    }
}

/// Radial function R(r) in atomic units, normalized as ∫R²r²dr = 1.
#[derive(Debug, Clone)]
pub struct RadialFunction {
    pub r: Vec<f64>,
    pub values: Vec<f64>,
    /// Quadrature weights for ∫·dr on this grid.
    pub weights: Vec<f64>,
}

impl RadialFunction {
    pub fn norm(&self) -> f64 {
        self.r
            .iter()
            .zip(&self.values)
            .zip(&self.weights)
            .map(|((r, v), w)| w * r * r * v * v)
            .sum()
    }

    /// Sign changes of R, ignoring the near-zero region around the origin.
    pub fn node_count(&self) -> usize {
        let peak = self.values.iter().fold(0.0f64, |a, v| a.max(v.abs() * 1e-9));
        let mut last = 0.0f64;
        let mut nodes = 0;
        for (&r, &v) in self.r.iter().zip(&self.values) {
            if r < 1.0 || v.abs() < peak {
                continue;
            }
            if last != 0.0 && v.signum() != last.signum() {
                nodes += 1;
            }
            last = v;
        }
        nodes
    }
}

/// Attenuation exp(−2∫κ dr) of the density between the outer turning point
/// and `r_max`, from the WKB decay constant.
fn wkb_tail_suppression(state: &RydbergState, r_max: f64) -> f64 {
    let ns = state.nu_star();
    let ll = (state.l * (state.l + 1)) as f64;
    let kappa2 = |r: f64| 1.0 / (ns * ns) - 2.0 / r + ll / (r * r);
    let disc = (1.0 - ll / (ns * ns)).max(0.0).sqrt();
    let r_turn = ns * ns * (1.0 + disc);
    if r_max <= r_turn {
        return 1.0;
    }
    let n = 2000;
    let h = (r_max - r_turn) / n as f64;
    let w = simpson_weights(n + 1, h);
    let integral: f64 = (0..=n).map(|i| w[i] * kappa2(r_turn + h * i as f64).max(0.0).sqrt()).sum();
    (-2.0 * integral).exp()
}

/// Solves for R(r) by inward Numerov integration in x = ln r with the
/// substitution R = y/√r, where y'' = g y and
/// g = (l + ½)² − 2r + r²/ν*².
pub fn radial_wavefunction(state: &RydbergState, grid: &RadialGrid) -> Result<RadialFunction> {
    let ns = state.nu_star();
    let r_max = grid.r_max();
    if r_max < 3.0 * ns * ns {
        return Err(Error::GridExtent(format!(
            "r_max = {r_max:.3e} a0 is below 3 nu*^2 = {:.3e} a0",
            3.0 * ns * ns
        )));
    }
    let tail = wkb_tail_suppression(state, r_max);
    if tail > 1e-10 {
        return Err(Error::GridExtent(format!(
            "wavefunction tail not decayed at r_max = {r_max:.3e} a0 (suppression {tail:.1e})"
        )));
    }

    let n = grid.r.len();
    let h = grid.h;
    let lh = state.l as f64 + 0.5;
    let f: Vec<f64> = grid
        .r
        .iter()
        .map(|&r| 1.0 - h * h * (lh * lh - 2.0 * r + r * r / (ns * ns)) / 12.0)
        .collect();
    let g_end = lh * lh - 2.0 * r_max + r_max * r_max / (ns * ns);
    let mut y = vec![0.0; n];
    y[n - 1] = 1e-30;
    y[n - 2] = 1e-30 * (h * g_end.max(0.0).sqrt()).exp();
    for k in (1..n - 1).rev() {
        y[k - 1] = ((12.0 - 10.0 * f[k]) * y[k] - f[k + 1] * y[k + 1]) / f[k - 1];
        if y[k - 1].abs() > 1e200 {
            for v in &mut y[k - 1..] {
                *v *= 1e-200;
            }
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::GridExtent("Numerov integration overflowed".into()));
    }

    let sw = simpson_weights(n, h);
    let weights: Vec<f64> = sw.iter().zip(&grid.r).map(|(w, r)| w * r).collect();
    let mut values: Vec<f64> = y.iter().zip(&grid.r).map(|(y, r)| y / r.sqrt()).collect();
    let mut out = RadialFunction { r: grid.r.clone(), values: Vec::new(), weights };
    out.values = std::mem::take(&mut values);
    let norm = out.norm();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::GridExtent(format!("normalization integral {norm}")));
    }
    let s = norm.sqrt().recip();
    // Fix the sign so the outermost lobe is positive.
    let sign = out.values.iter().rev().find(|v| **v != 0.0).map_or(1.0, |v| v.signum());
    out.values.iter_mut().for_each(|v| *v *= s * sign);
    Ok(out)
}

/// Multipole components of |ψ|² = ρ₀(r) + ρ₂(r)P₂(cos θ), in SI.
#[derive(Debug, Clone)]
pub struct OrbitalDensity {
    /// State tag; `None` for densities imported from an external code.
    pub state: Option<RydbergState>,
    /// Radii (m).
    pub r: Vec<f64>,
    /// Quadrature weights for ∫·dr (m).
    pub weights: Vec<f64>,
    /// ρ₀(r) (m⁻³).
    pub rho0: Vec<f64>,
    /// ρ₂(r) (m⁻³).
    pub rho2: Vec<f64>,
}

impl OrbitalDensity {
    /// 4π∫r²ρ₀dr.
    pub fn normalization(&self) -> f64 {
        self.radial_moment(0)
    }

    /// 4π∫r^(2+k)ρ₀dr, e.g. k = 1 gives ⟨r⟩ (m).
    pub fn radial_moment(&self, k: i32) -> f64 {
        4.0 * PI
            * self
                .r
                .iter()
                .zip(&self.weights)
                .zip(&self.rho0)
                .map(|((r, w), p)| w * r.powi(2 + k) * p)
                .sum::<f64>()
    }

    /// Minimum of ρ₀ + ρ₂P₂(u) over r and u ∈ [−1, 1].
    pub fn min_density(&self) -> f64 {
        self.rho0
            .iter()
            .zip(&self.rho2)
            .map(|(a, b)| (a + b).min(a - 0.5 * b))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_density(&self) -> f64 {
        self.rho0
            .iter()
            .zip(&self.rho2)
            .map(|(a, b)| (a + b).max(a - 0.5 * b))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["r [m]", "rho_0 [m^-3]", "rho_2 [m^-3]"]).map_err(|e| csv_err(path, e))?;
        for i in 0..self.r.len() {
            w.write_record(&[
                format!("{:e}", self.r[i]),
                format!("{:e}", self.rho0[i]),
                format!("{:e}", self.rho2[i]),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a density written by [`write_csv`](Self::write_csv) or produced
    /// by an external code. Radii must be strictly increasing.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let (mut r, mut rho0, mut rho2) = (Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let num = |j: usize| -> Result<f64> {
                rec.get(j)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Input(format!("{}: row {}: bad column {}", path.display(), i + 2, j)))
            };
            r.push(num(0)?);
            rho0.push(num(1)?);
            rho2.push(num(2)?);
        }
        if r.len() < 3 || r.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input(format!("{}: radii must be increasing", path.display())));
        }
        let weights = trapezoid_weights(&r);
        Ok(Self { state: None, r, weights, rho0, rho2 })
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Input(format!("{}: {e}", path.display()))
}

/// Density multipoles on a given atomic-unit grid.
pub fn density_multipoles_on(state: &RydbergState, grid: &RadialGrid) -> Result<OrbitalDensity> {
    if state.l > 1 || state.m != 0 {
        return Err(Error::Unsupported(format!("(l, m) = ({}, {})", state.l, state.m)));
    }
    let rf = radial_wavefunction(state, grid)?;
    let a3 = BOHR_RADIUS.powi(3);
    let rho0: Vec<f64> = rf.values.iter().map(|v| v * v / (4.0 * PI * a3)).collect();
    // |Y_10|² = (1 + 2P₂)/4π
    let rho2 = match state.l {
        0 => vec![0.0; rho0.len()],
        _ => rho0.iter().map(|p| 2.0 * p).collect(),
    };
    Ok(OrbitalDensity {
        state: Some(*state),
        r: rf.r.iter().map(|r| r * BOHR_RADIUS).collect(),
        weights: rf.weights.iter().map(|w| w * BOHR_RADIUS).collect(),
        rho0,
        rho2,
    })
}

/// Density multipoles on the default grid with `n` points.
pub fn density_multipoles(state: &RydbergState, n: usize) -> Result<OrbitalDensity> {
    density_multipoles_on(state, &RadialGrid::for_state(state, n))
}

/// Mean orbit radius ⟨r⟩ = ½[3ν*² − l(l+1)] a₀ (m).
pub fn orbit_radius(state: &RydbergState) -> f64 {
    let ns = state.nu_star();
    0.5 * (3.0 * ns * ns - (state.l * (state.l + 1)) as f64) * BOHR_RADIUS
}
