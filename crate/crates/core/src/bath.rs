//! The Bogoliubov environment seen by the qubit.
//!
//! The interaction is H_int = σ_z Σ_q (Δκ_q/2)(b_q + b_q†) with
//! Δκ_q = g0√ρ (ū_q − v̄_q) ∫d³x (|ψ_p|² − |ψ_s|²) e^{iq·x}/√𝒱.
//! Only direction-averaged squares of the couplings enter the observables,
//! so the multipole form factors are combined with weights 1/(2L+1) and no
//! three-dimensional q grid is needed.
//!
//! The discrete bath is a set of modes (ω_k, W_k) with
//! W_k = Σ_{q in bin k}(Δκ_q/2ħ)², obtained by trapezoid quadrature in ln q.
//! Then C(τ) = Σ W_k e^{−iω_kτ},
//! r(t) = exp[−4 Σ W_k (1 − cos ω_k t)/ω_k²] and T_dc = (2 Σ W_k)^{−1/2}.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{logspace, one_minus_cos, spherical_bessel_j, trapezoid_weights};
use crate::orbitals::{density_multipoles, orbit_radius, OrbitalDensity, RydbergState};
use crate::params::{derive, Angular, Config, PhysicalConfig, HBAR};
use crate::Complex;

/// Bogoliubov dispersion of a homogeneous condensate.
#[derive(Debug, Clone, Copy)]
pub struct Bogoliubov {
    pub mass: f64,
    /// Chemical potential U0ρ (J).
    pub mu: f64,
}

/// One Bogoliubov mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdgMode {
    /// Free-particle energy E_q (J).
    pub energy: f64,
    /// ω_q (rad/s).
    pub omega: f64,
    pub u: f64,
    pub v: f64,
}

impl Bogoliubov {
    pub fn new(cfg: &PhysicalConfig) -> Self {
        Self { mass: cfg.atom_mass, mu: derive(cfg).u0 * cfg.bec_density }
    }

    /// E_q, ω_q and the amplitudes fixed by (ū − v̄)² = E_q/ħω_q and
    /// (ū + v̄)² = ħω_q/E_q, so that ū² − v̄² = 1.
    pub fn mode(&self, q: f64) -> Result<BdgMode> {
        if !(q > 0.0 && q.is_finite()) {
            return Err(Error::Domain(format!("wavenumber must be positive, got {q}")));
        }
        let e = HBAR * HBAR * q * q / (2.0 * self.mass);
        let hw = (e * (e + 2.0 * self.mu)).sqrt();
        let minus = (e / hw).sqrt();
        let plus = (hw / e).sqrt();
        // v = (ħω − E)/(2√(Eħω)) written without the cancellation at large q.
        let v = self.mu * e / ((hw + e) * (e * hw).sqrt());
        Ok(BdgMode { energy: e, omega: hw / HBAR, u: 0.5 * (plus + minus), v })
    }

    /// Inverse dispersion q(ω).
    pub fn q_of_omega(&self, omega: f64) -> f64 {
        let hw = HBAR * omega;
        let e = hw * hw / (self.mu + (self.mu * self.mu + hw * hw).sqrt());
        (2.0 * self.mass * e).sqrt() / HBAR
    }

    /// Group velocity dω/dq (m/s).
    pub fn group_velocity(&self, q: f64) -> f64 {
        let e = HBAR * HBAR * q * q / (2.0 * self.mass);
        let hw = (e * (e + 2.0 * self.mu)).sqrt();
        HBAR * q / self.mass * (e + self.mu) / hw
    }
}

/// Multipole form factors f_L(q) = 4π∫r²ρ_L(r) j_L(qr) dr for L = 0, 2.
pub fn form_factor(density: &OrbitalDensity, q: f64) -> [f64; 2] {
    let mut f0 = 0.0;
    let mut f2 = 0.0;
    let has_l2 = density.rho2.iter().any(|&v| v != 0.0);
    for i in 0..density.r.len() {
        let r = density.r[i];
        let w = 4.0 * PI * density.weights[i] * r * r;
        let x = q * r;
        f0 += w * density.rho0[i] * spherical_bessel_j(0, x);
        if has_l2 {
            f2 += w * density.rho2[i] * spherical_bessel_j(2, x);
        }
    }
    [f0, f2]
}

/// Which combination of the two orbital densities a coupling uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingKind {
    /// |ψ_p|² − |ψ_s|², giving Δκ_q.
    Difference,
    /// |ψ_p|² + |ψ_s|², giving κ̄_q.
    Sum,
}

/// Numerical options of the bath construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathOptions {
    pub q_points: usize,
    /// q range in units of 1/R, R the larger orbit radius.
    pub q_min: f64,
    pub q_max: f64,
    pub radial_points: usize,
}

impl Default for BathOptions {
    fn default() -> Self {
        Self { q_points: 2000, q_min: 1e-2, q_max: 1e2, radial_points: 4000 }
    }
}

impl BathOptions {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            q_points: cfg.grid.q_points,
            q_min: cfg.grid.q_min,
            q_max: cfg.grid.q_max,
            radial_points: cfg.grid.radial_points,
        }
    }
}

/// The s and p states of the configured principal quantum number.
pub fn qubit_states(cfg: &PhysicalConfig) -> Result<(RydbergState, RydbergState)> {
    Ok((
        RydbergState::s(cfg.nu, cfg.quantum_defect_s)?,
        RydbergState::p(cfg.nu, cfg.quantum_defect_p)?,
    ))
}

/// Larger of the two orbit radii (m); the length unit of the q grid and of
/// the density smoothing.
pub fn reference_radius(cfg: &PhysicalConfig) -> Result<f64> {
    let (s, p) = qubit_states(cfg)?;
    Ok(orbit_radius(&s).max(orbit_radius(&p)))
}

/// Gaussian smoothing length ℓ (m) applied to both electron densities.
pub fn smoothing_length(cfg: &PhysicalConfig) -> Result<f64> {
    Ok(cfg.density_smoothing * reference_radius(cfg)?)
}

/// Fourier transform exp(−(qℓ)²/2) of the normalized smoothing kernel.
#[inline]
pub fn smoothing_filter(q: f64, ell: f64) -> f64 {
    (-0.5 * (q * ell) * (q * ell)).exp()
}

/// Discrete bath: mode frequencies ω_k (rad/s) and weights W_k (s⁻²).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscreteBath {
    pub omega: Vec<f64>,
    pub weight: Vec<f64>,
}

impl DiscreteBath {
    /// Σ W_k = C(0) = ∫J(ω)dω.
    pub fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }

    /// r(t) = exp[−4 Σ W_k (1 − cos ω_k t)/ω_k²].
    pub fn coherence(&self, t: f64) -> f64 {
        (-4.0 * self.dephasing_exponent(t)).exp()
    }

    /// Σ W_k (1 − cos ω_k t)/ω_k², so that ln r = −4 × this.
    pub fn dephasing_exponent(&self, t: f64) -> f64 {
        self.omega
            .iter()
            .zip(&self.weight)
            .map(|(w, g)| g * one_minus_cos(w * t) / (w * w))
            .sum()
    }

    /// C(τ) = Σ W_k e^{−iω_kτ}.
    pub fn correlation(&self, tau: f64) -> Complex {
        let (mut re, mut im) = (0.0, 0.0);
        for (w, g) in self.omega.iter().zip(&self.weight) {
            let (s, c) = (w * tau).sin_cos();
            re += g * c;
            im -= g * s;
        }
        Complex::new(re, im)
    }

    /// T_dc = (2 Σ W_k)^{−1/2}; infinite for an uncoupled bath.
    pub fn decoherence_time(&self) -> f64 {
        let s = self.total_weight();
        if s > 0.0 {
            (2.0 * s).sqrt().recip()
        } else {
            f64::INFINITY
        }
    }

    /// Smallest ω below which a fraction `frac` of the total weight lies.
    pub fn effective_cutoff(&self, frac: f64) -> f64 {
        let mut idx: Vec<usize> = (0..self.omega.len()).collect();
        idx.sort_by(|&a, &b| self.omega[a].total_cmp(&self.omega[b]));
        let total = self.total_weight();
        let mut acc = 0.0;
        for &i in &idx {
            acc += self.weight[i];
            if acc >= frac * total {
                return self.omega[i];
            }
        }
        idx.last().map_or(0.0, |&i| self.omega[i])
    }

    /// Drops modes whose weight is below `rel` times the largest weight.
    pub fn pruned(&self, rel: f64) -> Self {
        let wmax = self.weight.iter().cloned().fold(0.0, f64::max);
        let keep: Vec<usize> =
            (0..self.weight.len()).filter(|&i| self.weight[i] > rel * wmax).collect();
        Self {
            omega: keep.iter().map(|&i| self.omega[i]).collect(),
            weight: keep.iter().map(|&i| self.weight[i]).collect(),
        }
    }
}

/// Cumulative weight fraction used to define the effective bandwidth.
pub const CUTOFF_FRACTION: f64 = 1.0 - 1e-10;

/// Tabulated environment for one configuration.
#[derive(Debug, Clone)]
pub struct BathSpec {
    pub q: Vec<f64>,
    pub energy: Vec<f64>,
    pub omega: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// f_0 of the s state.
    pub ff_s: Vec<f64>,
    /// f_0 and f_2 of the p state.
    pub ff_p0: Vec<f64>,
    pub ff_p2: Vec<f64>,
    /// Δκ_rms √𝒱 (J m^{3/2}), including the smoothing filter.
    pub delta_kappa: Vec<f64>,
    /// κ̄_rms √𝒱 (J m^{3/2}), including the smoothing filter.
    pub kappa_bar: Vec<f64>,
    /// J(ω_q) (s⁻²/(rad/s)).
    pub spectral: Vec<f64>,
    /// Mode weights W_k (s⁻²) on the q nodes.
    pub weights: Vec<f64>,
    pub smoothing: f64,
    pub angular: Angular,
    pub g0: f64,
    pub density: f64,
    pub bogoliubov: Bogoliubov,
    pub s: OrbitalDensity,
    pub p: OrbitalDensity,
    pub nu: u32,
}

/// Direction-averaged |Σ_L i^L f_L P_L|² with weights 1/(2L+1).
fn angular_rms(f0: f64, f2: f64, angular: Angular) -> f64 {
    match angular {
        Angular::Multipole => (f0 * f0 + f2 * f2 / 5.0).sqrt(),
        Angular::Spherical => f0.abs(),
    }
}

impl BathSpec {
    pub fn build(cfg: &PhysicalConfig, opts: &BathOptions) -> Result<Self> {
        let (s_state, p_state) = qubit_states(cfg)?;
        let s = density_multipoles(&s_state, opts.radial_points)?;
        let p = density_multipoles(&p_state, opts.radial_points)?;
        Self::from_densities(cfg, opts, s, p)
    }

    /// Builds the bath from externally supplied densities.
    pub fn from_densities(
        cfg: &PhysicalConfig,
        opts: &BathOptions,
        s: OrbitalDensity,
        p: OrbitalDensity,
    ) -> Result<Self> {
        let r_ref = reference_radius(cfg)?;
        let ell = cfg.density_smoothing * r_ref;
        let bog = Bogoliubov::new(cfg);
        let g0 = derive(cfg).g0;
        let q = logspace(opts.q_min / r_ref, opts.q_max / r_ref, opts.q_points);
        let modes = q.iter().map(|&q| bog.mode(q)).collect::<Result<Vec<_>>>()?;
        let ffs: Vec<([f64; 2], [f64; 2])> =
            q.par_iter().map(|&q| (form_factor(&s, q), form_factor(&p, q))).collect();

        let n = q.len();
        let mut spec = BathSpec {
            energy: modes.iter().map(|m| m.energy).collect(),
            omega: modes.iter().map(|m| m.omega).collect(),
            u: modes.iter().map(|m| m.u).collect(),
            v: modes.iter().map(|m| m.v).collect(),
            ff_s: ffs.iter().map(|f| f.0[0]).collect(),
            ff_p0: ffs.iter().map(|f| f.1[0]).collect(),
            ff_p2: ffs.iter().map(|f| f.1[1]).collect(),
            delta_kappa: vec![0.0; n],
            kappa_bar: vec![0.0; n],
            spectral: vec![0.0; n],
            weights: vec![0.0; n],
            q,
            smoothing: ell,
            angular: cfg.angular,
            g0,
            density: cfg.bec_density,
            bogoliubov: bog,
            s,
            p,
            nu: cfg.nu,
        };
        let lnq: Vec<f64> = spec.q.iter().map(|q| q.ln()).collect();
        let tw = trapezoid_weights(&lnq);
        for i in 0..n {
            let (dk, kb) = spec.couplings_at(i);
            spec.delta_kappa[i] = dk;
            spec.kappa_bar[i] = kb;
            let q = spec.q[i];
            let density_of_states = 4.0 * PI * q * q / (2.0 * PI).powi(3);
            let c2 = (dk / (2.0 * HBAR)).powi(2);
            spec.spectral[i] = density_of_states * c2 / bog.group_velocity(q);
            spec.weights[i] = tw[i] * q * density_of_states * c2;
        }
        Ok(spec)
    }

    fn couplings_at(&self, i: usize) -> (f64, f64) {
        let pref = self.g0 * self.density.sqrt() * (self.u[i] - self.v[i])
            * smoothing_filter(self.q[i], self.smoothing);
        let d = angular_rms(self.ff_p0[i] - self.ff_s[i], self.ff_p2[i], self.angular);
        let s = angular_rms(self.ff_p0[i] + self.ff_s[i], self.ff_p2[i], self.angular);
        (pref.abs() * d, pref.abs() * s)
    }

    /// Angular-RMS coupling times √𝒱 at an arbitrary q (J m^{3/2}).
    pub fn coupling_rms(&self, q: f64, kind: CouplingKind) -> Result<f64> {
        let m = self.bogoliubov.mode(q)?;
        let fs = form_factor(&self.s, q);
        let fp = form_factor(&self.p, q);
        let pref = (self.g0 * self.density.sqrt() * (m.u - m.v) * smoothing_filter(q, self.smoothing)).abs();
        let sign = match kind {
            CouplingKind::Difference => -1.0,
            CouplingKind::Sum => 1.0,
        };
        Ok(pref * angular_rms(fp[0] + sign * fs[0], fp[1] + sign * fs[1], self.angular))
    }

    /// Coherent-state offsets d_q √𝒱 = κ̄_q √𝒱/(2ħω_q) (m^{3/2}).
    pub fn offsets(&self) -> Vec<f64> {
        self.kappa_bar.iter().zip(&self.omega).map(|(k, w)| k / (2.0 * HBAR * w)).collect()
    }

    pub fn omega_range(&self) -> (f64, f64) {
        (self.omega[0], *self.omega.last().unwrap())
    }

    /// J(ω) evaluated directly at q(ω), not interpolated.
    pub fn spectral_density(&self, omega: f64) -> Result<f64> {
        let (lo, hi) = self.omega_range();
        if !(omega >= lo && omega <= hi) {
            return Err(Error::Range(format!("omega = {omega:.4e} outside [{lo:.4e}, {hi:.4e}] rad/s")));
        }
        let q = self.bogoliubov.q_of_omega(omega);
        let dk = self.coupling_rms(q, CouplingKind::Difference)?;
        let dos = 4.0 * PI * q * q / (2.0 * PI).powi(3);
        Ok(dos * (dk / (2.0 * HBAR)).powi(2) / self.bogoliubov.group_velocity(q))
    }

    /// Mode representation on the q nodes.
    pub fn modes(&self) -> DiscreteBath {
        DiscreteBath { omega: self.omega.clone(), weight: self.weights.clone() }
    }

    /// Independent representation on `n` log-spaced ω nodes spanning the
    /// tabulated range, with J evaluated directly at each node.
    pub fn omega_space_modes(&self, n: usize) -> Result<DiscreteBath> {
        let (lo, hi) = self.omega_range();
        let omega = logspace(lo, hi, n);
        // Clamp endpoints against round-off in exp(ln(·)).
        let omega: Vec<f64> = omega.into_iter().map(|w| w.clamp(lo, hi)).collect();
        let lnw: Vec<f64> = omega.iter().map(|w| w.ln()).collect();
        let tw = trapezoid_weights(&lnw);
        let j = omega.par_iter().map(|&w| self.spectral_density(w)).collect::<Result<Vec<_>>>()?;
        let weight = (0..n).map(|i| tw[i] * omega[i] * j[i]).collect();
        Ok(DiscreteBath { omega, weight })
    }

    /// Analytic coherence factor r(t) for the pure-dephasing model.
    pub fn analytic_coherence(&self, t: f64) -> f64 {
        self.modes().coherence(t)
    }

    /// T_dc with quadrature diagnostics.
    pub fn decoherence_time(&self) -> Result<DecoherenceTime> {
        let full = self.modes();
        let integrand: Vec<f64> =
            self.weights.iter().enumerate().map(|(i, w)| w / trapezoid_weight_lnq(&self.q, i)).collect();
        let peak = integrand.iter().cloned().fold(0.0, f64::max);
        let ends = integrand[0].max(*integrand.last().unwrap());
        if peak > 0.0 && ends > 1e-6 * peak {
            return Err(Error::Resolution(format!(
                "coupling integrand not decayed at the q-grid ends ({:.2e} of peak)",
                ends / peak
            )));
        }
        // Same rule on every other node.
        let q2: Vec<f64> = self.q.iter().step_by(2).cloned().collect();
        let lnq2: Vec<f64> = q2.iter().map(|q| q.ln()).collect();
        let tw2 = trapezoid_weights(&lnq2);
        let coarse: f64 = (0..q2.len()).map(|k| tw2[k] * integrand[2 * k]).sum();
        let fine = full.total_weight();
        let t_dc = full.decoherence_time();
        let richardson = if fine > 0.0 { ((coarse - fine) / fine).abs() } else { 0.0 };
        if richardson > 1e-4 {
            return Err(Error::Resolution(format!("q quadrature not converged ({richardson:.2e})")));
        }
        Ok(DecoherenceTime { nu: self.nu, t_dc, total_weight: fine, richardson })
    }

    /// C(τ) on the uniform grid τ_i = i dτ, i < n.
    pub fn bath_correlation(&self, dtau: f64, n: usize) -> Result<CorrelationTable> {
        correlation_table(&self.modes(), dtau, n)
    }

    /// Correlation table long enough for [`memory_time`] to resolve the
    /// envelope decay and to cover `decays` memory times, with
    /// the sampling step set by the effective bandwidth.
    pub fn auto_correlation(&self, decays: f64) -> Result<CorrelationTable> {
        auto_correlation(&self.modes(), decays)
    }
}

fn trapezoid_weight_lnq(q: &[f64], i: usize) -> f64 {
    let n = q.len();
    let left = if i > 0 { (q[i] / q[i - 1]).ln() } else { 0.0 };
    let right = if i + 1 < n { (q[i + 1] / q[i]).ln() } else { 0.0 };
    0.5 * (left + right)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecoherenceTime {
    pub nu: u32,
    /// T_dc (s).
    pub t_dc: f64,
    /// Σ W_k = ∫J dω (s⁻²).
    pub total_weight: f64,
    /// Relative change of Σ W_k when every other q node is dropped.
    pub richardson: f64,
}

/// T_dc across principal quantum numbers, all else fixed.
pub fn decoherence_scaling(cfg: &PhysicalConfig, opts: &BathOptions, nus: &[u32]) -> Result<Vec<DecoherenceTime>> {
    nus.iter()
        .map(|&nu| BathSpec::build(&PhysicalConfig { nu, ..cfg.clone() }, opts)?.decoherence_time())
        .collect()
}

/// C(τ) sampled on τ_i = i dτ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub dtau: f64,
    pub values: Vec<Complex>,
}

impl CorrelationTable {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tau(&self, i: usize) -> f64 {
        i as f64 * self.dtau
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::io::write_table(
            path,
            &["tau [s]", "Re C [s^-2]", "Im C [s^-2]"],
            self.values.iter().enumerate().map(|(i, c)| [self.tau(i), c.re, c.im]),
        )
    }

    pub fn read_csv(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let (_, rows) = crate::io::read_table(&path)?;
        if rows.len() < 2 || rows.iter().any(|r| r.len() < 3) {
            return Err(Error::Input("correlation table needs rows of (tau, Re C, Im C)".into()));
        }
        let dtau = rows[1][0] - rows[0][0];
        for (i, r) in rows.iter().enumerate() {
            if (r[0] - i as f64 * dtau).abs() > 1e-9 * dtau * (i as f64 + 1.0) {
                return Err(Error::Input(format!("tau grid not uniform at row {}", i + 2)));
            }
        }
        Ok(Self { dtau, values: rows.iter().map(|r| Complex::new(r[1], r[2])).collect() })
    }
}

/// Tabulates C(τ) = Σ W_k e^{−iω_kτ}. The step must resolve the effective
/// bandwidth with at least four samples per period.
pub fn correlation_table(bath: &DiscreteBath, dtau: f64, n: usize) -> Result<CorrelationTable> {
    let w_eff = bath.effective_cutoff(CUTOFF_FRACTION);
    if w_eff * dtau > 0.5 * PI * (1.0 + 1e-12) {
        return Err(Error::Resolution(format!(
            "dtau = {dtau:.3e} s gives fewer than 4 samples per period at omega = {w_eff:.3e} rad/s"
        )));
    }
    let values = (0..n).into_par_iter().map(|i| bath.correlation(i as f64 * dtau)).collect();
    Ok(CorrelationTable { dtau, values })
}

/// See [`BathSpec::auto_correlation`].
pub fn auto_correlation(bath: &DiscreteBath, decays: f64) -> Result<CorrelationTable> {
    let w_eff = bath.effective_cutoff(CUTOFF_FRACTION);
    if !(w_eff > 0.0) {
        return Err(Error::Domain("bath has no spectral weight".into()));
    }
    let dtau = 0.5 * PI / w_eff;
    let mut n = 256usize;
    loop {
        let table = correlation_table(bath, dtau, n)?;
        let tm = memory_time(&table);
        if tm.bounded && table.tau(n - 1) >= decays * tm.value {
            let keep = ((decays * tm.value / dtau).ceil() as usize + 1).max(64).min(n);
            return Ok(CorrelationTable { dtau, values: table.values[..keep].to_vec() });
        }
        if n >= 1 << 16 {
            return Err(Error::Resolution(format!(
                "correlation envelope did not decay within {:.3e} s",
                table.tau(n - 1)
            )));
        }
        n *= 2;
    }
}

/// Memory time with a flag telling whether the envelope crossed C(0)/e
/// inside the table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryTime {
    /// T_m (s), or the table length when unbounded.
    pub value: f64,
    pub bounded: bool,
}

/// First τ at which the upper envelope of |C(τ)| falls below C(0)/e.
///
/// The envelope interpolates linearly between the samples that dominate all
/// later samples (the local maxima of the decaying hull), so a monotone
/// decay is its own envelope.
pub fn memory_time(table: &CorrelationTable) -> MemoryTime {
    let mag: Vec<f64> = table.values.iter().map(|c| c.norm()).collect();
    let n = mag.len();
    if n == 0 {
        return MemoryTime { value: 0.0, bounded: false };
    }
    let threshold = mag[0] / std::f64::consts::E;
    // Hull nodes, collected from the right.
    let mut nodes = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for i in (0..n).rev() {
        if mag[i] > best {
            best = mag[i];
            nodes.push(i);
        }
    }
    nodes.reverse();
    // A run of consecutive hull nodes that stops before the table end is the
    // falling flank of one peak; only the peak is a local maximum.
    let mut peaks = Vec::with_capacity(nodes.len());
    let mut k = 0;
    while k < nodes.len() {
        let start = k;
        while k + 1 < nodes.len() && nodes[k + 1] == nodes[k] + 1 {
            k += 1;
        }
        if nodes[k] == n - 1 {
            peaks.extend_from_slice(&nodes[start..=k]);
        } else {
            peaks.push(nodes[start]);
        }
        k += 1;
    }
    let nodes = peaks;
    for w in nodes.windows(2) {
        let (a, b) = (w[0], w[1]);
        if mag[b] < threshold {
            let frac = (mag[a] - threshold) / (mag[a] - mag[b]);
            let tau = table.tau(a) + frac * (table.tau(b) - table.tau(a));
            return MemoryTime { value: tau, bounded: true };
        }
    }
    MemoryTime { value: table.tau(n - 1), bounded: false }
}
