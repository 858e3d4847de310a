//! Complex Gaussian noise z_t with E[z_t z_s*] = C(t − s) and E[z_t z_s] = 0.
//!
//! Each path draws from its own ChaCha8 stream: the generator is seeded with
//! the master seed and the stream number is the path index, so any path can
//! be regenerated alone and paths can be produced in any order.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::bath::{CorrelationTable, DiscreteBath};
use crate::error::{Error, Result};
use crate::expfit::ExpModes;
use crate::params::NoiseMethod;
use crate::Complex;

/// Generator for path `stream` under `seed`.
pub fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard circular complex Gaussian, E|ζ|² = 1.
pub fn circular_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new(s * re, s * im)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub dt: f64,
    /// z_n = z(n dt) (s⁻¹). The hierarchy is driven by the conjugate.
    pub z: Vec<Complex>,
    pub method: NoiseMethod,
    pub seed: u64,
    pub stream: u64,
}

/// Checks the spectral-method preconditions and returns the retained modes.
pub fn spectral_components(bath: &DiscreteBath, dt: f64, prune: f64) -> Result<DiscreteBath> {
    if let Some(w) = bath.weight.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Input(format!("negative spectral weight {w}")));
    }
    let kept = bath.pruned(prune);
    let w_max = kept.omega.iter().cloned().fold(0.0, f64::max);
    if w_max * dt >= std::f64::consts::PI {
        return Err(Error::Resolution(format!(
            "aliasing: omega_max dt = {:.3} >= pi (omega_max = {w_max:.3e} rad/s, dt = {dt:.3e} s)",
            w_max * dt
        )));
    }
    Ok(kept)
}

/// z_n = Σ_k √W_k ζ_k e^{−iω_k n dt} with independent ζ_k.
///
/// `components` must come from [`spectral_components`].
pub fn generate_spectral(components: &DiscreteBath, dt: f64, n: usize, seed: u64, stream: u64) -> NoisePath {
    let mut rng = path_rng(seed, stream);
    let k = components.omega.len();
    let mut phasor: Vec<Complex> = components
        .weight
        .iter()
        .map(|w| w.sqrt() * circular_gaussian(&mut rng))
        .collect();
    let step: Vec<Complex> = components.omega.iter().map(|w| Complex::new(0.0, -w * dt).exp()).collect();
    let mut z = Vec::with_capacity(n);
    for i in 0..n {
        // Refresh the phasors exactly now and then to stop round-off drift.
        if i > 0 && i % 4096 == 0 {
            let t = i as f64 * dt;
            let mut rng = path_rng(seed, stream);
            for j in 0..k {
                let amp = components.weight[j].sqrt() * circular_gaussian(&mut rng);
                phasor[j] = amp * Complex::new(0.0, -components.omega[j] * t).exp();
            }
        }
        z.push(phasor.iter().sum());
        for (p, s) in phasor.iter_mut().zip(&step) {
            *p *= s;
        }
    }
    NoisePath { dt, z, method: NoiseMethod::Spectral, seed, stream }
}

/// Sum of exactly discretized complex Ornstein–Uhlenbeck processes, one per
/// mode. Requires real, non-negative amplitudes.
pub fn generate_from_modes(modes: &ExpModes, dt: f64, n: usize, seed: u64, stream: u64) -> Result<NoisePath> {
    if !modes.has_real_nonnegative_amplitudes() {
        return Err(Error::Precondition(
            "mode noise needs real non-negative amplitudes g_j; use the spectral method".into(),
        ));
    }
    let mut rng = path_rng(seed, stream);
    let decay: Vec<Complex> = modes.modes.iter().map(|m| (-m.w() * dt).exp()).collect();
    let kick: Vec<f64> = modes
        .modes
        .iter()
        .map(|m| (m.g.re * -(-2.0 * m.gamma * dt).exp_m1()).sqrt())
        .collect();
    let mut xi: Vec<Complex> =
        modes.modes.iter().map(|m| m.g.re.sqrt() * circular_gaussian(&mut rng)).collect();
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        z.push(xi.iter().sum());
        for j in 0..xi.len() {
            xi[j] = decay[j] * xi[j] + kick[j] * circular_gaussian(&mut rng);
        }
    }
    Ok(NoisePath { dt, z, method: NoiseMethod::Modes, seed, stream })
}

/// Paths `0..count` of one master seed, generated in parallel.
pub fn ensemble_spectral(components: &DiscreteBath, dt: f64, n: usize, seed: u64, count: usize) -> Vec<NoisePath> {
    (0..count as u64).into_par_iter().map(|s| generate_spectral(components, dt, n, seed, s)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub paths: usize,
    pub lags: usize,
    /// max_t |Ĉ(t) − C(t)|/SE(t).
    pub max_z: f64,
    /// Lag index where `max_z` occurs.
    pub worst_lag: usize,
    pub threshold: f64,
    pub pass: bool,
    /// Ĉ(t) and SE(t) per lag.
    #[serde(skip)]
    pub estimate: Vec<Complex>,
    #[serde(skip)]
    pub standard_error: Vec<f64>,
}

/// Ensemble estimate Ĉ(t) = mean z(t) z*(0) against the reference table.
///
/// SE(t) is the complex standard error √(Var Re + Var Im)/√N of the
/// per-path products; the check passes when every lag is within 3 SE.
pub fn validate_correlation(paths: &[NoisePath], reference: &CorrelationTable) -> Result<ValidationReport> {
    if paths.len() < 100 {
        return Err(Error::Input(format!("need at least 100 paths, got {}", paths.len())));
    }
    let dt = paths[0].dt;
    if paths.iter().any(|p| p.dt != dt) {
        return Err(Error::Input("paths have different time steps".into()));
    }
    if ((dt - reference.dtau) / reference.dtau).abs() > 1e-12 {
        return Err(Error::Input(format!("path dt {dt:.6e} s differs from table step {:.6e} s", reference.dtau)));
    }
    let lags = paths.iter().map(|p| p.z.len()).min().unwrap_or(0).min(reference.len());
    let n = paths.len() as f64;
    let mut estimate = Vec::with_capacity(lags);
    let mut standard_error = Vec::with_capacity(lags);
    let (mut max_z, mut worst_lag) = (0.0f64, 0usize);
    for t in 0..lags {
        let (mut s, mut sre2, mut sim2) = (Complex::new(0.0, 0.0), 0.0, 0.0);
        for p in paths {
            let x = p.z[t] * p.z[0].conj();
            s += x;
            sre2 += x.re * x.re;
            sim2 += x.im * x.im;
        }
        let mean = s / n;
        let var = (sre2 - n * mean.re * mean.re + sim2 - n * mean.im * mean.im) / (n - 1.0);
        let se = (var.max(0.0) / n).sqrt();
        let dev = (mean - reference.values[t]).norm();
        let z = if se > 0.0 {
            dev / se
        } else if dev > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if z > max_z {
            max_z = z;
            worst_lag = t;
        }
        estimate.push(mean);
        standard_error.push(se);
    }
    Ok(ValidationReport {
        paths: paths.len(),
        lags,
        max_z,
        worst_lag,
        threshold: 3.0,
        pass: max_z <= 3.0,
        estimate,
        standard_error,
    })
}

const MAGIC: &[u8; 4] = b"RYDN";
const VERSION: u32 = 1;

/// Binary dump: magic "RYDN", u32 version, f64 dt, u64 n, u64 seed, then n
/// little-endian complex64 pairs (f32 re, f32 im). All fields little-endian.
pub fn write_binary(path: impl AsRef<Path>, noise: &NoisePath) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + 8 * noise.z.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&noise.dt.to_le_bytes());
    buf.extend_from_slice(&(noise.z.len() as u64).to_le_bytes());
    buf.extend_from_slice(&noise.seed.to_le_bytes());
    for z in &noise.z {
        buf.extend_from_slice(&(z.re as f32).to_le_bytes());
        buf.extend_from_slice(&(z.im as f32).to_le_bytes());
    }
    crate::io::write_atomic(path, &buf)
}

/// Reads a dump written by [`write_binary`]; returns (dt, seed, samples).
pub fn read_binary(path: impl AsRef<Path>) -> Result<(f64, u64, Vec<num_complex::Complex32>)> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 32];
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[..4] != MAGIC {
        return Err(Error::Input(format!("{}: not a noise dump", path.display())));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Input(format!("{}: unsupported version {version}", path.display())));
    }
    let dt = f64::from_le_bytes(head[8..16].try_into().unwrap());
    let n = u64::from_le_bytes(head[16..24].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(head[24..32].try_into().unwrap());
    let mut body = Vec::new();
    f.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
    if body.len() != 8 * n {
        return Err(Error::Input(format!("{}: expected {n} samples", path.display())));
    }
    let z = body
        .chunks_exact(8)
        .map(|c| {
            num_complex::Complex32::new(
                f32::from_le_bytes(c[..4].try_into().unwrap()),
                f32::from_le_bytes(c[4..].try_into().unwrap()),
            )
        })
        .collect();
    Ok((dt, seed, z))
}

/// Streams several paths into one writer, back to back.
pub fn write_binary_many<W: Write>(mut w: W, paths: &[NoisePath]) -> std::io::Result<()> {
    for p in paths {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&p.dt.to_le_bytes())?;
        w.write_all(&(p.z.len() as u64).to_le_bytes())?;
        w.write_all(&p.seed.to_le_bytes())?;
        for z in &p.z {
            w.write_all(&(z.re as f32).to_le_bytes())?;
            w.write_all(&(z.im as f32).to_le_bytes())?;
        }
    }
    Ok(())
}
