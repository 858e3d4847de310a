//! Physical constants, run configuration and derived condensate quantities.
//!
//! Everything is SI. The config file is TOML with the sections `[physics]`,
//! `[grid]`, `[hops]`, `[noise]` and `[output]`; every key is optional.
//! Environment variables named `RYDECO_<SECTION>_<KEY>` override file values,
//! e.g. `RYDECO_PHYSICS_NU=120`.
//!
//! | key                                  | default                 |
//! |--------------------------------------|-------------------------|
//! | `physics.atom_mass`                  | 86.909180527 u (Rb-87)  |
//! | `physics.bec_density`                | 1e20 m⁻³                |
//! | `physics.scattering_length_bb`       | 5.3e-9 m                |
//! | `physics.electron_scattering_length` | −16.05 a₀               |
//! | `physics.nu`                         | 80                      |
//! | `physics.quantum_defect_s`           | 3.131                   |
//! | `physics.quantum_defect_p`           | 2.654                   |
//! | `physics.rabi`, `physics.detuning`   | 0 rad/s                 |
//! | `physics.c_up`, `physics.c_down`     | `[0.7071…, 0]` each     |
//! | `physics.density_smoothing`          | 0.125 (× orbit radius)  |
//! | `physics.angular`                    | `"multipole"`           |

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reduced Planck constant (J s), CODATA 2018.
pub const HBAR: f64 = 1.054_571_817e-34;
/// Electron mass (kg), CODATA 2018.
pub const ELECTRON_MASS: f64 = 9.109_383_701_5e-31;
/// Bohr radius (m), CODATA 2018.
pub const BOHR_RADIUS: f64 = 5.291_772_109_03e-11;
/// Unified atomic mass unit (kg), CODATA 2018.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
/// Mass of ⁸⁷Rb (kg).
pub const RB87_MASS: f64 = 86.909_180_527 * ATOMIC_MASS_UNIT;

/// Angular treatment of the p-state anisotropy in the couplings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Angular {
    /// Keep the L = 0 and L = 2 multipoles.
    #[default]
    Multipole,
    /// Drop the L = 2 multipole (spherically averaged densities).
    Spherical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicalConfig {
    pub atom_mass: f64,
    pub bec_density: f64,
    pub scattering_length_bb: f64,
    pub electron_scattering_length: f64,
    pub nu: u32,
    pub quantum_defect_s: f64,
    pub quantum_defect_p: f64,
    /// Microwave Rabi frequency Ω_mw (rad/s).
    pub rabi: f64,
    /// Detuning Δ (rad/s).
    pub detuning: f64,
    pub c_up: Complex64,
    pub c_down: Complex64,
    /// Quantization volume 𝒱 (m³). Set from the box for condensate runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantization_volume: Option<f64>,
    /// Gaussian smoothing length of the electron densities, in units of the
    /// larger of the two orbit radii. Zero disables smoothing.
    pub density_smoothing: f64,
    pub angular: Angular,
}

impl Default for PhysicalConfig {
    fn default() -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            atom_mass: RB87_MASS,
            bec_density: 1e20,
            scattering_length_bb: 5.3e-9,
            electron_scattering_length: -16.05 * BOHR_RADIUS,
            nu: 80,
            quantum_defect_s: 3.131,
            quantum_defect_p: 2.654,
            rabi: 0.0,
            detuning: 0.0,
            c_up: Complex64::new(h, 0.0),
            c_down: Complex64::new(h, 0.0),
            quantization_volume: None,
            density_smoothing: 0.125,
            angular: Angular::Multipole,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Points of the logarithmic radial grid.
    pub radial_points: usize,
    /// Points of the logarithmic momentum grid.
    pub q_points: usize,
    /// Momentum range in units of 1/orbit radius.
    pub q_min: f64,
    pub q_max: f64,
    /// Condensate grid points per axis (power of two).
    pub gpe_points: usize,
    /// Box edge (μm). Defaults to `box_orbits` orbit radii.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub box_um: Option<f64>,
    pub box_orbits: f64,
    /// Background column density ρ L_y (μm⁻²). When set, ρ follows from
    /// the box edge.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub column_density_um2: Option<f64>,
    /// Condensate evolution time (μs). Defaults to 2 T_dc.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gpe_tmax_us: Option<f64>,
    pub gpe_stride: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            radial_points: 4000,
            q_points: 2000,
            q_min: 1e-2,
            q_max: 1e2,
            gpe_points: 128,
            box_um: None,
            box_orbits: 6.0,
            column_density_um2: None,
            gpe_tmax_us: None,
            gpe_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HopsConfig {
    pub ntraj: usize,
    pub depth: usize,
    pub max_modes: usize,
    pub fit_tolerance: f64,
    /// Propagation time (μs). Defaults to 2 T_dc undriven and 4 T_dc
    /// driven.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tmax_us: Option<f64>,
    pub n_out: usize,
    pub seed: u64,
    pub hierarchy_cap: usize,
    pub max_rejection: f64,
    /// Step size as a fraction of the fastest rate in the problem.
    pub dt_factor: f64,
    /// Also propagate the s and p initial states and report 𝒩.
    pub non_markovianity: bool,
    /// Raise the depth until D → D+1 moves the curve by < `depth_tol`.
    pub adaptive_depth: bool,
    pub depth_tol: f64,
    pub max_depth: usize,
}

impl Default for HopsConfig {
    fn default() -> Self {
        Self {
            ntraj: 1000,
            depth: 4,
            max_modes: 12,
            fit_tolerance: 1e-3,
            tmax_us: None,
            n_out: 200,
            seed: 1,
            hierarchy_cap: 200_000,
            max_rejection: 0.01,
            dt_factor: 0.01,
            non_markovianity: true,
            adaptive_depth: false,
            depth_tol: 0.01,
            max_depth: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMethod {
    #[default]
    Spectral,
    Modes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub method: NoiseMethod,
    pub validate_paths: usize,
    pub seed: u64,
    /// Spectral components with weight below this fraction of the largest
    /// are dropped.
    pub prune: f64,
    /// Paths written to the binary dump (0 disables it).
    pub dump_paths: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { method: NoiseMethod::Spectral, validate_paths: 10_000, seed: 7, prune: 1e-14, dump_paths: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    #[default]
    Csv,
    Pgm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: String,
    pub format: FrameFormat,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into(), format: FrameFormat::Csv }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub physics: PhysicalConfig,
    pub grid: GridConfig,
    pub hops: HopsConfig,
    pub noise: NoiseConfig,
    pub output: OutputConfig,
}

const SECTIONS: [&str; 5] = ["physics", "grid", "hops", "noise", "output"];

fn line_of(src: &str, err: &toml::de::Error) -> usize {
    err.span().map_or(0, |s| src[..s.start.min(src.len())].matches('\n').count() + 1)
}

impl Config {
    /// Parses TOML text; missing keys take their defaults. No env overrides.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(src)
            .map_err(|e| Error::Parse { line: line_of(src, &e), msg: e.message().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses TOML text and applies `RYDECO_<SECTION>_<KEY>` overrides taken
    /// from `vars`.
    pub fn from_toml_str_with_env<I>(src: &str, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        Self::layered(&Config::default(), src, vars)
    }

    /// Like [`Config::from_toml_str_with_env`], with keys absent from the
    /// file taken from `base` instead of the defaults.
    pub fn layered<I>(base: &Config, src: &str, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        // Parse once directly so type errors carry line numbers.
        Self::from_toml_str(src).or_else(|e| match e {
            Error::Invariant { .. } => Ok(Config::default()),
            other => Err(other),
        })?;
        let file: toml::Table = toml::from_str(src)
            .map_err(|e| Error::Parse { line: line_of(src, &e), msg: e.message().to_string() })?;
        let mut table = toml::Table::try_from(base).map_err(|e| Error::Serde(e.to_string()))?;
        for (section, values) in file {
            match (table.get_mut(&section), values) {
                (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => dst.extend(src),
                (_, v) => {
                    table.insert(section, v);
                }
            }
        }
        for (name, value) in vars {
            let Some(rest) = name.strip_prefix("RYDECO_") else { continue };
            let rest = rest.to_ascii_lowercase();
            let Some((section, key)) = SECTIONS
                .iter()
                .find_map(|s| rest.strip_prefix(s).and_then(|k| k.strip_prefix('_')).map(|k| (*s, k)))
            else {
                continue;
            };
            let parsed = format!("v = {value}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(value.clone()));
            let entry = table
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => {
                    t.insert(key.to_string(), parsed);
                }
                _ => {
                    return Err(Error::Parse { line: 0, msg: format!("`{section}` is not a table") })
                }
            }
        }
        let cfg: Config = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            Error::Parse { line: 0, msg: format!("environment override: {}", e.message()) }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks every field invariant, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        let p = &self.physics;
        let fail = |field: &'static str, msg: String| Err(Error::Invariant { field, msg });
        if !(p.atom_mass > 0.0 && p.atom_mass.is_finite()) {
            return fail("physics.atom_mass", format!("must be > 0, got {}", p.atom_mass));
        }
        if !(p.bec_density > 0.0 && p.bec_density.is_finite()) {
            return fail("physics.bec_density", format!("must be > 0, got {}", p.bec_density));
        }
        if !(p.scattering_length_bb >= 0.0) {
            return fail(
                "physics.scattering_length_bb",
                format!("must be >= 0, got {}", p.scattering_length_bb),
            );
        }
        if !p.electron_scattering_length.is_finite() {
            return fail("physics.electron_scattering_length", "must be finite".into());
        }
        if p.nu < 2 {
            return fail("physics.nu", format!("must be >= 2, got {}", p.nu));
        }
        for (field, d) in [("physics.quantum_defect_s", p.quantum_defect_s), ("physics.quantum_defect_p", p.quantum_defect_p)] {
            if !(d >= 0.0 && d < p.nu as f64 - 1.0) {
                return fail(field, format!("need 0 <= defect < nu - 1, got {d}"));
            }
        }
        let norm = p.c_up.norm_sqr() + p.c_down.norm_sqr();
        if (norm - 1.0).abs() > 1e-12 {
            return fail("physics.c_up", format!("|c_up|² + |c_down|² = {norm}, expected 1"));
        }
        if !(p.density_smoothing >= 0.0) {
            return fail("physics.density_smoothing", "must be >= 0".into());
        }
        if let Some(v) = p.quantization_volume {
            if !(v > 0.0) {
                return fail("physics.quantization_volume", "must be > 0".into());
            }
        }
        let g = &self.grid;
        if g.radial_points < 100 {
            return fail("grid.radial_points", "need at least 100 points".into());
        }
        if g.q_points < 16 {
            return fail("grid.q_points", "need at least 16 points".into());
        }
        if !(g.q_min > 0.0 && g.q_max > g.q_min) {
            return fail("grid.q_min", "need 0 < q_min < q_max".into());
        }
        if !g.gpe_points.is_power_of_two() || g.gpe_points < 8 {
            return fail("grid.gpe_points", format!("must be a power of two >= 8, got {}", g.gpe_points));
        }
        if g.gpe_stride == 0 {
            return fail("grid.gpe_stride", "must be >= 1".into());
        }
        let h = &self.hops;
        if h.ntraj < 2 {
            return fail("hops.ntraj", "need at least 2 trajectories".into());
        }
        if h.depth < 1 || h.max_modes < 1 {
            return fail("hops.depth", "depth and max_modes must be >= 1".into());
        }
        if !(h.fit_tolerance > 0.0) {
            return fail("hops.fit_tolerance", "must be > 0".into());
        }
        if h.n_out < 2 {
            return fail("hops.n_out", "need at least 2 output times".into());
        }
        if !(h.dt_factor > 0.0 && h.dt_factor <= 0.1) {
            return fail("hops.dt_factor", "must be in (0, 0.1]".into());
        }
        if h.adaptive_depth && h.max_depth <= h.depth {
            return fail("hops.max_depth", "must exceed hops.depth when adaptive_depth is set".into());
        }
        if !(h.depth_tol > 0.0) {
            return fail("hops.depth_tol", "must be > 0".into());
        }
        // TOML integers are i64; a larger seed could not be written back out.
        for (field, seed) in [("hops.seed", h.seed), ("noise.seed", self.noise.seed)] {
            if seed > i64::MAX as u64 {
                return fail(field, format!("must be <= {}, got {seed}", i64::MAX));
            }
        }
        if self.noise.validate_paths < 100 {
            return fail("noise.validate_paths", "need at least 100 paths".into());
        }
        if !(self.noise.prune >= 0.0 && self.noise.prune < 1.0) {
            return fail("noise.prune", "must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// Reads a config file and applies environment overrides from the process.
pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Config::from_toml_str_with_env(&src, std::env::vars())
}

/// Quantities that follow from the physical configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DerivedQuantities {
    /// Boson-boson contact strength U0 (J m³).
    pub u0: f64,
    /// Electron-atom contact strength g0 (J m³).
    pub g0: f64,
    /// Healing length ξ (m); infinite for a non-interacting gas.
    pub healing_length: f64,
    /// Sound speed c_s (m/s).
    pub sound_speed: f64,
    /// Set when U0 = 0.
    pub degenerate: bool,
}

pub fn derive(cfg: &PhysicalConfig) -> DerivedQuantities {
    use std::f64::consts::PI;
    let m = cfg.atom_mass;
    let u0 = 4.0 * PI * HBAR * HBAR * cfg.scattering_length_bb / m;
    let g0 = 2.0 * PI * HBAR * HBAR * cfg.electron_scattering_length / ELECTRON_MASS;
    let mu = u0 * cfg.bec_density;
    let degenerate = u0 == 0.0;
    DerivedQuantities {
        u0,
        g0,
        healing_length: if degenerate { f64::INFINITY } else { HBAR / (2.0 * m * mu).sqrt() },
        sound_speed: (mu / m).sqrt(),
        degenerate,
    }
}

/// Converts a frequency in MHz to an angular frequency in rad/s.
pub fn mhz_to_rad(f_mhz: f64) -> f64 {
    2.0 * std::f64::consts::PI * f_mhz * 1e6
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = Config::from_toml_str("").unwrap();
        assert_eq!(cfg, Config::default());
    }

    #[test]
    fn nu_override_keeps_rb87_mass() {
        let cfg = Config::from_toml_str("[physics]\nnu = 80\n").unwrap();
        assert_eq!(cfg.physics.nu, 80);
        assert!((cfg.physics.atom_mass - 1.443e-25).abs() / 1.443e-25 < 1e-3);
    }

    #[test]
    fn plus_state_preparation() {
        let cfg = Config::from_toml_str(
            "[physics]\nc_up = [0.7071067811865476, 0.0]\nc_down = [0.7071067811865476, 0.0]\n",
        )
        .unwrap();
        assert_eq!(cfg.physics.c_up, cfg.physics.c_down);
    }

    #[test]
    fn parse_error_reports_line() {
        let err = Config::from_toml_str("[physics]\nnu = 80\nbec_density = \"dense\"\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invariant_violations_name_the_field() {
        for (src, field) in [
            ("[physics]\nnu = 1\n", "physics.nu"),
            ("[physics]\natom_mass = -1.0\n", "physics.atom_mass"),
            ("[physics]\nbec_density = 0.0\n", "physics.bec_density"),
            ("[physics]\nc_up = [1.0, 0.0]\n", "physics.c_up"),
        ] {
            match Config::from_toml_str(src).unwrap_err() {
                Error::Invariant { field: f, .. } => assert_eq!(f, field),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn env_overrides() {
        let vars = vec![
            ("RYDECO_PHYSICS_NU".to_string(), "120".to_string()),
            ("RYDECO_NOISE_METHOD".to_string(), "modes".to_string()),
            ("RYDECO_HOPS_FIT_TOLERANCE".to_string(), "0.01".to_string()),
            ("UNRELATED".to_string(), "1".to_string()),
        ];
        let cfg = Config::from_toml_str_with_env("[physics]\nnu = 40\n", vars).unwrap();
        assert_eq!(cfg.physics.nu, 120);
        assert_eq!(cfg.noise.method, NoiseMethod::Modes);
        assert_eq!(cfg.hops.fit_tolerance, 0.01);
    }

    #[test]
    fn load_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[grid]\ngpe_points = 64\n").unwrap();
        assert_eq!(load_config(&path).unwrap().grid.gpe_points, 64);
        assert!(matches!(load_config(dir.path().join("missing.toml")), Err(Error::Io { .. })));
    }

    #[test]
    fn zero_interaction_is_degenerate() {
        let cfg = PhysicalConfig { scattering_length_bb: 0.0, ..Default::default() };
        let d = derive(&cfg);
        assert_eq!(d.u0, 0.0);
        assert!(d.degenerate && d.healing_length.is_infinite());
    }

    #[test]
    fn sound_speed_scales_with_sqrt_density() {
        let a = derive(&PhysicalConfig::default());
        let b = derive(&PhysicalConfig { bec_density: 2e20, ..Default::default() });
        assert!((b.sound_speed / a.sound_speed - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn rb87_regression_values() {
        // Hand evaluation: U0 = 4πħ²a/m, ξ = ħ/√(2mU0ρ), c = √(U0ρ/m).
        let d = derive(&PhysicalConfig::default());
        assert!((d.u0 / 5.132_433e-51 - 1.0).abs() < 1e-5, "{}", d.u0);
        assert!((d.healing_length / 2.739_947e-7 - 1.0).abs() < 1e-5, "{}", d.healing_length);
        assert!((d.sound_speed / 1.885_838e-3 - 1.0).abs() < 1e-5, "{}", d.sound_speed);
        assert!(d.g0 < 0.0);
    }
}
