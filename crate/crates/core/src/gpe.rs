//! Impurity Gross–Pitaevskii evolution of the two condensate branches,
//! their overlap and the interface-imaging signal.
//!
//! Fields live on a periodic box with z as the fastest index:
//! `i = (ix·ny + iy)·nz + iz`. The impurity sits at the box center and the
//! quantization axis is z. Column densities integrate along y.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::Serialize;

use crate::bath::{form_factor, reference_radius, smoothing_filter, smoothing_length};
use crate::error::{Error, Result};
use crate::numeric::{chunked_sum, legendre_p2};
use crate::orbitals::{density_multipoles, orbit_radius, OrbitalDensity};
use crate::params::{derive, Angular, Config, PhysicalConfig, HBAR};
use crate::Complex;

/// Resolution floor k_Nyquist·ℓ for the smoothed impurity density.
pub const MIN_NYQUIST_SMOOTHING: f64 = 8.0;
/// Largest phase advanced per step by the potential or the kinetic corner.
pub const MAX_PHASE_PER_STEP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid3D {
    pub n: [usize; 3],
    /// Extents (m).
    pub l: [f64; 3],
}

impl Grid3D {
    pub fn new(n: [usize; 3], l: [f64; 3]) -> Result<Self> {
        if n.iter().any(|&n| n < 2 || !n.is_power_of_two()) {
            return Err(Error::Invariant { field: "grid.gpe_points".into(), msg: format!("{n:?} must be powers of two") });
        }
        if l.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Invariant { field: "grid.box_um".into(), msg: format!("extents {l:?} must be positive") });
        }
        Ok(Grid3D { n, l })
    }

    pub fn cubic(n: usize, l: f64) -> Result<Self> {
        Self::new([n; 3], [l; 3])
    }

    /// Box from the config: `box_um` if set, otherwise `box_orbits` orbit
    /// radii.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let l = match cfg.grid.box_um {
            Some(um) => um * 1e-6,
            None => cfg.grid.box_orbits * reference_radius(&cfg.physics)?,
        };
        Self::cubic(cfg.grid.gpe_points, l)
    }

    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.l[a] / self.n[a] as f64)
    }

    pub fn volume(&self) -> f64 {
        self.l.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.volume() / self.len() as f64
    }

    /// Angular wavenumbers along one axis in FFT order.
    pub fn wavenumbers(&self, axis: usize) -> Vec<f64> {
        let n = self.n[axis] as i64;
        let dk = 2.0 * std::f64::consts::PI / self.l[axis];
        (0..n).map(|i| dk * if i < n / 2 { i } else { i - n } as f64).collect()
    }

    pub fn nyquist(&self) -> f64 {
        (0..3).map(|a| std::f64::consts::PI / self.spacing()[a]).fold(f64::INFINITY, f64::min)
    }

    /// Largest |k| on the grid.
    pub fn corner(&self) -> f64 {
        (0..3).map(|a| (std::f64::consts::PI / self.spacing()[a]).powi(2)).sum::<f64>().sqrt()
    }

    /// Box ≥ 6 orbit radii, spacing ≤ radius/16, and the smoothed density
    /// resolved (k_Nyquist·ℓ ≥ 8).
    pub fn check(&self, radius: f64, ell: f64) -> Result<()> {
        let lmin = self.l.iter().cloned().fold(f64::INFINITY, f64::min);
        if lmin < 6.0 * radius * (1.0 - 1e-12) {
            return Err(Error::GridExtent(format!(
                "box {:.3e} m is smaller than 6 orbit radii ({:.3e} m)",
                lmin,
                6.0 * radius
            )));
        }
        let dmax = self.spacing().iter().cloned().fold(0.0, f64::max);
        if dmax > radius / 16.0 * (1.0 + 1e-12) {
            return Err(Error::Resolution(format!("spacing {dmax:.3e} m exceeds orbit radius/16 ({:.3e} m)", radius / 16.0)));
        }
        if ell > 0.0 && self.nyquist() * ell < MIN_NYQUIST_SMOOTHING {
            return Err(Error::Resolution(format!(
                "k_Nyquist·ℓ = {:.2} < {MIN_NYQUIST_SMOOTHING}; refine the grid",
                self.nyquist() * ell
            )));
        }
        Ok(())
    }

    /// k² per grid point in FFT order.
    pub fn k_squared(&self) -> Vec<f64> {
        let (kx, ky, kz) = (self.wavenumbers(0), self.wavenumbers(1), self.wavenumbers(2));
        let mut out = Vec::with_capacity(self.len());
        for x in &kx {
            for y in &ky {
                for z in &kz {
                    out.push(x * x + y * y + z * z);
                }
            }
        }
        out
    }
}

/// Cache-blocked transpose of a rows×cols matrix into `dst`.
fn transpose(src: &[Complex], rows: usize, cols: usize, dst: &mut [Complex]) {
    const B: usize = 32;
    dst.par_chunks_mut(rows * B.min(cols)).enumerate().for_each(|(blk, out)| {
        let c0 = blk * B.min(cols);
        let ncols = out.len() / rows;
        for r0 in (0..rows).step_by(B) {
            for c in 0..ncols {
                for r in r0..(r0 + B).min(rows) {
                    out[c * rows + r] = src[r * cols + c0 + c];
                }
            }
        }
    });
}

/// Separable 3D FFT built from 1D rustfft plans.
pub struct Fft3 {
    n: [usize; 3],
    fwd: [Arc<dyn Fft<f64>>; 3],
    inv: [Arc<dyn Fft<f64>>; 3],
    scratch: Vec<Complex>,
}

impl Fft3 {
    pub fn new(grid: &Grid3D) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = grid.n.map(|n| planner.plan_fft_forward(n));
        let inv = grid.n.map(|n| planner.plan_fft_inverse(n));
        Fft3 { n: grid.n, fwd, inv, scratch: vec![Complex::new(0.0, 0.0); grid.len()] }
    }

    pub fn forward(&mut self, data: &mut [Complex]) {
        self.run(data, false);
    }

    /// Inverse transform including the 1/N normalization.
    pub fn inverse(&mut self, data: &mut [Complex]) {
        self.run(data, true);
        let s = 1.0 / data.len() as f64;
        data.par_iter_mut().for_each(|v| *v *= s);
    }

    fn run(&mut self, data: &mut [Complex], inverse: bool) {
        let [nx, ny, nz] = self.n;
        let plans = if inverse { &self.inv } else { &self.fwd };
        let (px, py, pz) = (plans[0].clone(), plans[1].clone(), plans[2].clone());
        // z lines are contiguous.
        data.par_chunks_mut(ny * nz).for_each(|slab| pz.process(slab));
        // y: transpose each x slab to (z, y), transform, transpose back.
        data.par_chunks_mut(ny * nz).zip(self.scratch.par_chunks_mut(ny * nz)).for_each(|(slab, tmp)| {
            for y in 0..ny {
                for z in 0..nz {
                    tmp[z * ny + y] = slab[y * nz + z];
                }
            }
            py.process(tmp);
            for z in 0..nz {
                for y in 0..ny {
                    slab[y * nz + z] = tmp[z * ny + y];
                }
            }
        });
        // x: global transpose to (yz, x).
        let cols = ny * nz;
        transpose(data, nx, cols, &mut self.scratch);
        self.scratch.par_chunks_mut(nx).for_each(|line| px.process(line));
        transpose(&self.scratch, cols, nx, data);
    }
}

/// Catmull–Rom interpolation table on a uniform grid starting at 0.
struct Table {
    dk: f64,
    v: Vec<f64>,
}

impl Table {
    fn at(&self, k: f64) -> f64 {
        let x = k / self.dk;
        let i = x.floor() as usize;
        if i + 2 >= self.v.len() {
            return *self.v.last().unwrap_or(&0.0);
        }
        let t = x - i as f64;
        let p0 = if i == 0 { self.v[1] } else { self.v[i - 1] };
        let (p1, p2, p3) = (self.v[i], self.v[i + 1], self.v[i + 2]);
        p1 + 0.5 * t * (p2 - p0 + t * (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3 + t * (3.0 * (p1 - p2) + p3 - p0)))
    }
}

/// Samples per form-factor table.
const TABLE_POINTS: usize = 8192;

/// V(x) = g0 [ρ0(r) + ρ2(r)P2(cos θ)] smoothed by the Gaussian of width ℓ,
/// synthesized from its Fourier transform g0 S(k)[f0(k) − f2(k)P2(k̂_z)].
///
/// The result is band-limited to the grid. The smoothed density is
/// non-negative, so Fourier ringing of order 1e-15 is clipped to the sign
/// of g0.
pub fn impurity_potential(density: &OrbitalDensity, grid: &Grid3D, g0: f64, ell: f64, angular: Angular) -> Vec<f64> {
    let kmax = grid.corner() * 1.001;
    let dk = kmax / (TABLE_POINTS - 3) as f64;
    let cut = if ell > 0.0 { 9.0 / ell } else { f64::INFINITY };
    let samples: Vec<[f64; 2]> = (0..TABLE_POINTS)
        .into_par_iter()
        .map(|i| {
            let k = i as f64 * dk;
            if k > cut {
                return [0.0, 0.0];
            }
            let s = smoothing_filter(k, ell);
            let f = form_factor(density, k);
            [s * f[0], s * f[1]]
        })
        .collect();
    let f0 = Table { dk, v: samples.iter().map(|s| s[0]).collect() };
    let f2 = Table { dk, v: samples.iter().map(|s| s[1]).collect() };
    let (kx, ky, kz) = (grid.wavenumbers(0), grid.wavenumbers(1), grid.wavenumbers(2));
    let [_, ny, nz] = grid.n;
    let mut spec = vec![Complex::new(0.0, 0.0); grid.len()];
    spec.par_chunks_mut(ny * nz).enumerate().for_each(|(ix, slab)| {
        for iy in 0..ny {
            for iz in 0..nz {
                let k2 = kx[ix] * kx[ix] + ky[iy] * ky[iy] + kz[iz] * kz[iz];
                let k = k2.sqrt();
                let mut v = f0.at(k);
                if angular == Angular::Multipole && k > 0.0 {
                    v -= f2.at(k) * legendre_p2(kz[iz] / k);
                }
                // Shift to the box center: e^{−ik·L/2} = (−1)^(ix+iy+iz).
                let sign = if (ix + iy + iz) % 2 == 0 { 1.0 } else { -1.0 };
                slab[iy * nz + iz] = Complex::new(sign * g0 * v, 0.0);
            }
        }
    });
    let mut fft = Fft3::new(grid);
    fft.inverse(&mut spec);
    let scale = 1.0 / grid.cell_volume();
    spec.par_iter()
        .map(|c| {
            let v = c.re * scale;
            if v * g0 < 0.0 {
                0.0
            } else {
                v
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Branch {
    Up,
    Down,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CondensateField {
    pub branch: Branch,
    /// φ_α (m^{−3/2}).
    pub psi: Vec<Complex>,
    pub t: f64,
}

impl CondensateField {
    /// Homogeneous φ = √ρ.
    pub fn uniform(branch: Branch, grid: &Grid3D, density: f64) -> Self {
        CondensateField { branch, psi: vec![Complex::new(density.sqrt(), 0.0); grid.len()], t: 0.0 }
    }

    pub fn atom_number(&self, grid: &Grid3D) -> f64 {
        chunked_sum(self.psi.len(), |i| self.psi[i].norm_sqr()) * grid.cell_volume()
    }
}

/// Strang-split propagator for one branch.
pub struct Stepper {
    pub grid: Grid3D,
    pub dt: f64,
    pub potential: Vec<f64>,
    /// U0 (J m³).
    pub u0: f64,
    pub mass: f64,
    k2: Vec<f64>,
    half: Vec<Complex>,
    full: Vec<Complex>,
    fft: Fft3,
}

impl Stepper {
    pub fn new(grid: Grid3D, potential: Vec<f64>, u0: f64, mass: f64, dt: f64) -> Self {
        let k2 = grid.k_squared();
        let phase = |k2: f64, frac: f64| Complex::new(0.0, -HBAR * k2 * dt * frac / (2.0 * mass)).exp();
        let half = k2.iter().map(|&k2| phase(k2, 0.5)).collect();
        let full = k2.iter().map(|&k2| phase(k2, 1.0)).collect();
        let fft = Fft3::new(&grid);
        Stepper { grid, dt, potential, u0, mass, k2, half, full, fft }
    }

    fn kinetic(&mut self, psi: &mut [Complex], factor_full: bool) {
        self.fft.forward(psi);
        let f = if factor_full { &self.full } else { &self.half };
        psi.par_iter_mut().zip(f.par_iter()).for_each(|(p, f)| *p *= f);
        self.fft.inverse(psi);
    }

    fn nonlinear(&self, psi: &mut [Complex]) {
        let c = self.dt / HBAR;
        let u0 = self.u0;
        psi.par_iter_mut().zip(self.potential.par_iter()).for_each(|(p, v)| {
            let phase = -(v + u0 * p.norm_sqr()) * c;
            *p *= Complex::new(0.0, phase).exp();
        });
    }

    /// One full Strang step: half kinetic, potential and interaction, half
    /// kinetic.
    pub fn step(&mut self, field: &mut CondensateField) {
        self.kinetic(&mut field.psi, false);
        self.nonlinear(&mut field.psi);
        self.kinetic(&mut field.psi, false);
        field.t += self.dt;
    }

    /// `n` steps with the inner kinetic half steps fused. Checks for NaN
    /// every 100 steps; on failure the field is restored to the last good
    /// check and an error returned.
    pub fn advance(&mut self, field: &mut CondensateField, n: usize) -> Result<()> {
        if n == 0 {
            return Ok(());
        }
        let mut good = (field.psi.clone(), field.t, 0usize);
        self.kinetic(&mut field.psi, false);
        for i in 0..n {
            self.nonlinear(&mut field.psi);
            let last = i + 1 == n;
            self.kinetic(&mut field.psi, !last);
            field.t += self.dt;
            if (i + 1) % 100 == 0 && !last {
                if field.psi.par_iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                    return Err(self.restore(field, good, i + 1));
                }
                // Undo the pending half step to store a proper checkpoint.
                let mut check = field.psi.clone();
                let conj: Vec<Complex> = self.half.iter().map(|c| c.conj()).collect();
                self.fft.forward(&mut check);
                check.par_iter_mut().zip(conj.par_iter()).for_each(|(p, f)| *p *= f);
                self.fft.inverse(&mut check);
                good = (check, field.t, i + 1);
            }
        }
        if field.psi.par_iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(self.restore(field, good, n));
        }
        Ok(())
    }

    fn restore(&self, field: &mut CondensateField, good: (Vec<Complex>, f64, usize), at: usize) -> Error {
        field.psi = good.0;
        field.t = good.1;
        Error::Unstable(format!("NaN in GPE field by step {at}; restored step {} (t = {:.4e} s)", good.2, good.1))
    }

    /// E = ∫ [ħ²|∇φ|²/2m + U0|φ|⁴/2 + V|φ|²] d³x.
    pub fn energy(&mut self, field: &CondensateField) -> f64 {
        let dv = self.grid.cell_volume();
        let mut spec = field.psi.clone();
        self.fft.forward(&mut spec);
        let n = spec.len() as f64;
        let k2 = &self.k2;
        let kin: f64 = chunked_sum(spec.len(), |i| spec[i].norm_sqr() * k2[i])
            * HBAR
            * HBAR
            / (2.0 * self.mass)
            / n;
        let u0 = self.u0;
        let (psi, pv) = (&field.psi, &self.potential);
        let pot: f64 = chunked_sum(psi.len(), |i| {
            let d = psi[i].norm_sqr();
            0.5 * u0 * d * d + pv[i] * d
        });
        (kin + pot) * dv
    }
}

/// dt keeping the phase per step below [`MAX_PHASE_PER_STEP`] for the
/// potential plus mean field and for the kinetic energy at the grid corner.
pub fn stable_dt(grid: &Grid3D, potential: &[f64], u0: f64, density: f64, mass: f64) -> f64 {
    let vmax = potential.iter().map(|v| (v + u0 * density).abs()).fold((u0 * density).abs(), f64::max);
    let kin = HBAR * grid.corner().powi(2) / (2.0 * mass);
    let rate = (vmax / HBAR).max(kin);
    MAX_PHASE_PER_STEP / rate
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coherence {
    /// o = ∫φ↑*φ↓ d³x / N_box.
    pub overlap: Complex,
    pub magnitude: f64,
    /// Continuously tracked N_box·arg o.
    pub phase: f64,
    /// True when |o| underflowed and r was set to 0.
    pub underflow: bool,
}

impl Coherence {
    pub fn r(&self) -> Complex {
        Complex::from_polar(self.magnitude, self.phase)
    }
}

/// r_GPE = o^N_box, with the phase continued from `previous` so that it
/// never jumps by 2π between frames.
pub fn coherence_overlap(
    up: &[Complex],
    down: &[Complex],
    grid: &Grid3D,
    n_box: f64,
    previous: Option<&Coherence>,
) -> Coherence {
    let dv = grid.cell_volume();
    let o: Complex = chunked_sum(up.len(), |i| up[i].conj() * down[i]) * dv / n_box;
    if o.norm() == 0.0 {
        return Coherence { overlap: o, magnitude: 0.0, phase: previous.map_or(0.0, |p| p.phase), underflow: true };
    }
    let mut arg = o.arg();
    if let Some(p) = previous {
        let prev = p.overlap.arg();
        let tau = 2.0 * std::f64::consts::PI;
        let unwrapped_prev = p.phase / n_box;
        let base = unwrapped_prev - prev;
        arg += base;
        // Pick the branch closest to the previous unwrapped argument.
        arg += tau * ((unwrapped_prev - arg) / tau).round();
    }
    let magnitude = (n_box * o.norm().ln()).exp();
    Coherence { overlap: o, magnitude, phase: n_box * arg, underflow: magnitude == 0.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImagingFrame {
    pub t: f64,
    /// Columns along x, rows along z; arrays are x-major (`ix·nz + iz`).
    pub nx: usize,
    pub nz: usize,
    pub dx: f64,
    pub dz: f64,
    pub inc: Vec<f64>,
    pub ms: Vec<f64>,
    pub delta: Vec<f64>,
    /// max |Δϱ| over the plane (m⁻²).
    pub s: f64,
    /// max Δϱ (signed).
    pub s_max: f64,
    pub r: Complex,
    pub a2: f64,
    pub valid: bool,
}

/// Column densities of the incoherent mixture and the projected
/// superposition A[|Ψ↑⟩ + |Ψ↓⟩], integrated along y.
///
/// Δϱ = (A² − ½)(ϱ↑ + ϱ↓) + A²(φ↑*φ↓ r/o + c.c.) with A² = 1/(2(1 + Re r)).
pub fn imaging_signal(up: &[Complex], down: &[Complex], grid: &Grid3D, coh: &Coherence, t: f64) -> ImagingFrame {
    let [nx, ny, nz] = grid.n;
    let [dx, dy, dz] = grid.spacing();
    let r = coh.r();
    let denom = 1.0 + r.re;
    let valid = denom > 1e-12 && !coh.underflow;
    let a2 = if valid { 0.5 / denom } else { 0.5 };
    let cross = if valid { r / coh.overlap } else { Complex::new(0.0, 0.0) };
    let cols: Vec<[f64; 2]> = (0..nx * nz)
        .into_par_iter()
        .map(|c| {
            let (ix, iz) = (c / nz, c % nz);
            let (mut inc, mut delta) = (0.0, 0.0);
            for iy in 0..ny {
                let i = (ix * ny + iy) * nz + iz;
                let (a, b) = (up[i], down[i]);
                let sum = a.norm_sqr() + b.norm_sqr();
                inc += 0.5 * sum;
                delta += (a2 - 0.5) * sum + 2.0 * a2 * (a.conj() * b * cross).re;
            }
            [inc * dy, delta * dy]
        })
        .collect();
    let inc: Vec<f64> = cols.iter().map(|c| c[0]).collect();
    let delta: Vec<f64> = cols.iter().map(|c| c[1]).collect();
    let ms: Vec<f64> = inc.iter().zip(&delta).map(|(i, d)| i + d).collect();
    let s = delta.iter().map(|d| d.abs()).fold(0.0, f64::max);
    let s_max = delta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    ImagingFrame { t, nx, nz, dx, dz, inc, ms, delta, s, s_max, r, a2, valid }
}

impl ImagingFrame {
    /// Rows (x, z, ϱ_inc, ϱ_ms, Δϱ) with x and z measured from the impurity.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let (cx, cz) = (self.nx / 2, self.nz / 2);
        let rows = (0..self.nx * self.nz).map(|c| {
            let (ix, iz) = (c / self.nz, c % self.nz);
            [
                (ix as f64 - cx as f64) * self.dx,
                (iz as f64 - cz as f64) * self.dz,
                self.inc[c],
                self.ms[c],
                self.delta[c],
            ]
        });
        crate::io::write_table(path, &["x [m]", "z [m]", "rho_inc [m^-2]", "rho_ms [m^-2]", "delta_rho [m^-2]"], rows)
    }

    /// Δϱ as a 16-bit binary PGM (big-endian samples, z rows from top to
    /// bottom as increasing z, x across) mapped linearly from [−a, a] to
    /// [0, 65535] with a = max|Δϱ|, plus a JSON sidecar with the mapping.
    pub fn write_pgm(&self, path: impl AsRef<Path>, rho0: f64) -> Result<()> {
        let path = path.as_ref();
        let a = if self.s > 0.0 { self.s } else { 1.0 };
        let mut buf = format!("P5\n{} {}\n65535\n", self.nx, self.nz).into_bytes();
        for iz in 0..self.nz {
            for ix in 0..self.nx {
                let v = self.delta[ix * self.nz + iz];
                let level = ((v + a) / (2.0 * a) * 65535.0).round().clamp(0.0, 65535.0) as u16;
                buf.extend_from_slice(&level.to_be_bytes());
            }
        }
        crate::io::write_atomic(path, &buf)?;
        let sidecar = serde_json::json!({
            "quantity": "delta_rho [m^-2]",
            "min": -a,
            "max": a,
            "mapping": "level = round((value - min) / (max - min) * 65535)",
            "rho0": rho0,
            "width": self.nx,
            "height": self.nz,
            "dx": self.dx,
            "dz": self.dz,
            "t": self.t,
        });
        let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Serde(e.to_string()))?;
        crate::io::write_atomic(path.with_extension("json"), &json)
    }
}

/// Reads the Δϱ plane back from a frame CSV (x-major order).
pub fn read_frame_csv(path: impl AsRef<Path>) -> Result<Vec<[f64; 5]>> {
    let (_, rows) = crate::io::read_table(path)?;
    rows.into_iter()
        .map(|r| r.try_into().map_err(|_| Error::Input("frame rows need 5 columns".into())))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SeriesSample {
    pub t: f64,
    pub r_abs: f64,
    pub r_arg: f64,
    pub s: f64,
    pub s_max: f64,
    pub underflow: bool,
}

/// Both branches on one grid, ready to run.
pub struct GpeRun {
    pub grid: Grid3D,
    pub density: f64,
    pub n_box: f64,
    pub up: Stepper,
    pub down: Stepper,
    pub dt: f64,
}

impl GpeRun {
    /// ↑ = p, ↓ = s; impurity potentials from the smoothed orbital
    /// densities; dt from [`stable_dt`] (or `dt` if smaller).
    pub fn new(phys: &PhysicalConfig, grid: Grid3D, radial_points: usize, dt: Option<f64>) -> Result<Self> {
        let (s, p) = crate::bath::qubit_states(phys)?;
        let radius = orbit_radius(&s).max(orbit_radius(&p));
        let ell = smoothing_length(phys)?;
        grid.check(radius, ell)?;
        let d = derive(phys);
        let dens_p = density_multipoles(&p, radial_points)?;
        let dens_s = density_multipoles(&s, radial_points)?;
        let v_up = impurity_potential(&dens_p, &grid, d.g0, ell, phys.angular);
        let v_down = impurity_potential(&dens_s, &grid, d.g0, ell, phys.angular);
        let rho = phys.bec_density;
        let auto = stable_dt(&grid, &v_up, d.u0, rho, phys.atom_mass).min(stable_dt(&grid, &v_down, d.u0, rho, phys.atom_mass));
        let dt = dt.map_or(auto, |d| d.min(auto));
        Ok(GpeRun {
            grid,
            density: rho,
            n_box: rho * grid.volume(),
            up: Stepper::new(grid, v_up, d.u0, phys.atom_mass, dt),
            down: Stepper::new(grid, v_down, d.u0, phys.atom_mass, dt),
            dt,
        })
    }

    /// Evolves both branches from the uniform state for `steps` steps,
    /// calling `on_sample` every `stride` steps (and at t = 0) with the
    /// series sample and the imaging frame.
    pub fn evolve_pair<F>(&mut self, steps: usize, stride: usize, mut on_sample: F) -> Result<Vec<SeriesSample>>
    where
        F: FnMut(&SeriesSample, &ImagingFrame, &CondensateField, &CondensateField) -> Result<()>,
    {
        let stride = stride.max(1);
        let mut up = CondensateField::uniform(Branch::Up, &self.grid, self.density);
        let mut down = CondensateField::uniform(Branch::Down, &self.grid, self.density);
        let mut out = Vec::new();
        let mut prev: Option<Coherence> = None;
        let mut done = 0;
        loop {
            let coh = coherence_overlap(&up.psi, &down.psi, &self.grid, self.n_box, prev.as_ref());
            let frame = imaging_signal(&up.psi, &down.psi, &self.grid, &coh, up.t);
            let sample = SeriesSample {
                t: up.t,
                r_abs: coh.magnitude,
                r_arg: coh.phase,
                s: frame.s,
                s_max: frame.s_max,
                underflow: coh.underflow,
            };
            on_sample(&sample, &frame, &up, &down)?;
            out.push(sample);
            prev = Some(coh);
            if done >= steps {
                break;
            }
            let n = stride.min(steps - done);
            self.up.advance(&mut up, n)?;
            self.down.advance(&mut down, n)?;
            done += n;
        }
        Ok(out)
    }
}

/// Writes the series CSV (t, |r_GPE|, arg r_GPE, s, max Δϱ).
pub fn write_series(path: impl AsRef<Path>, series: &[SeriesSample]) -> Result<()> {
    crate::io::write_table(
        path,
        &["t [s]", "|r_GPE|", "arg r_GPE [rad]", "s [m^-2]", "max delta_rho [m^-2]"],
        series.iter().map(|s| [s.t, s.r_abs, s.r_arg, s.s, s.s_max]),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_field(n: usize) -> Vec<Complex> {
        (0..n).map(|i| Complex::new(((i * 37 % 101) as f64).sin(), ((i * 11 % 53) as f64).cos())).collect()
    }

    #[test]
    fn fft_round_trip_and_plane_wave() {
        let grid = Grid3D::new([8, 4, 16], [1.0, 2.0, 3.0]).unwrap();
        let mut fft = Fft3::new(&grid);
        let orig = rand_field(grid.len());
        let mut a = orig.clone();
        fft.forward(&mut a);
        fft.inverse(&mut a);
        assert!(a.iter().zip(&orig).all(|(x, y)| (x - y).norm() < 1e-12));
        // e^{i k·x} with mode (1, 2, 3) lands in a single bin.
        let [nx, ny, nz] = grid.n;
        let mut pw = vec![Complex::new(0.0, 0.0); grid.len()];
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    let ph = 2.0 * std::f64::consts::PI
                        * (ix as f64 / nx as f64 + 2.0 * iy as f64 / ny as f64 + 3.0 * iz as f64 / nz as f64);
                    pw[(ix * ny + iy) * nz + iz] = Complex::new(0.0, ph).exp();
                }
            }
        }
        fft.forward(&mut pw);
        let hit = (1 * ny + 2) * nz + 3;
        assert!((pw[hit] - Complex::new(grid.len() as f64, 0.0)).norm() < 1e-9);
        assert!(pw.iter().enumerate().all(|(i, c)| i == hit || c.norm() < 1e-9));
    }

    #[test]
    fn free_plane_wave_evolves_exactly() {
        let grid = Grid3D::cubic(8, 1e-6).unwrap();
        let mass = 1.0e-25;
        let dt = 1e-6;
        let mut st = Stepper::new(grid, vec![0.0; grid.len()], 0.0, mass, dt);
        let k = grid.wavenumbers(2)[1];
        let mut f = CondensateField::uniform(Branch::Up, &grid, 1.0);
        for (i, p) in f.psi.iter_mut().enumerate() {
            let iz = i % 8;
            *p = Complex::new(0.0, k * iz as f64 * grid.spacing()[2]).exp();
        }
        let start = f.psi.clone();
        st.step(&mut f);
        let w = HBAR * k * k / (2.0 * mass);
        for (a, b) in f.psi.iter().zip(&start) {
            assert!((a - b * Complex::new(0.0, -w * dt).exp()).norm() < 1e-10);
        }
    }

    #[test]
    fn uniform_state_rotates_by_chemical_potential() {
        let grid = Grid3D::cubic(8, 1e-6).unwrap();
        let (u0, rho, dt) = (5e-51, 1e20, 1e-6);
        let mut st = Stepper::new(grid, vec![0.0; grid.len()], u0, 1e-25, dt);
        let mut f = CondensateField::uniform(Branch::Up, &grid, rho);
        st.advance(&mut f, 250).unwrap();
        let expect = Complex::new(0.0, -u0 * rho * 250.0 * dt / HBAR).exp() * rho.sqrt();
        assert!(f.psi.iter().all(|p| (p - expect).norm() < 1e-9 * rho.sqrt()));
    }

    #[test]
    fn zero_signal_limits() {
        let grid = Grid3D::cubic(8, 1e-6).unwrap();
        let phi = vec![Complex::new(1e10, 0.0); grid.len()];
        let n_box = 1e20 * grid.volume();
        let coh = coherence_overlap(&phi, &phi, &grid, n_box, None);
        assert!((coh.magnitude - 1.0).abs() < 1e-12 && coh.phase.abs() < 1e-12);
        let frame = imaging_signal(&phi, &phi, &grid, &coh, 0.0);
        assert!(frame.delta.iter().all(|d| d.abs() <= 1e-12 * frame.inc[0]));
        // A² = 1/(2(1 + r)), so the 1e-12 allowance on |r| becomes 1e-12/8 here.
        assert!((frame.a2 - 0.25).abs() < 1e-12 / 8.0, "{:e}", frame.a2 - 0.25);
    }

    #[test]
    fn phase_is_tracked_across_branch_cuts() {
        let grid = Grid3D::cubic(2, 1.0).unwrap();
        let up = vec![Complex::new(1.0, 0.0); 8];
        let n_box = 8.0;
        let mut prev = None;
        let mut last = 0.0;
        for step in 0..40 {
            let a = 0.1 * step as f64;
            let down: Vec<Complex> = up.iter().map(|u| u * Complex::new(0.0, a).exp()).collect();
            let c = coherence_overlap(&up, &down, &grid, n_box, prev.as_ref());
            assert!((c.phase - n_box * a).abs() < 1e-9, "step {step}");
            last = c.phase;
            prev = Some(c);
        }
        assert!(last > 2.0 * std::f64::consts::PI);
    }

    #[test]
    fn pgm_of_zero_frame_is_mid_gray() {
        let frame = ImagingFrame {
            t: 0.0,
            nx: 3,
            nz: 2,
            dx: 1.0,
            dz: 1.0,
            inc: vec![1.0; 6],
            ms: vec![1.0; 6],
            delta: vec![0.0; 6],
            s: 0.0,
            s_max: 0.0,
            r: Complex::new(1.0, 0.0),
            a2: 0.25,
            valid: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.pgm");
        frame.write_pgm(&p, 1.0).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let head = b"P5\n3 2\n65535\n";
        assert_eq!(&bytes[..head.len()], head);
        assert!(bytes[head.len()..].chunks(2).all(|c| u16::from_be_bytes([c[0], c[1]]) == 32768));
        assert!(p.with_extension("json").exists());
    }
}
