//! Reproducible runs. Each stage writes its tables into an output directory;
//! [`Run::finish`] lists them with SHA-256 checksums, the resolved config and
//! the seeds in `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bath::{memory_time, BathOptions, BathSpec, CorrelationTable};
use crate::error::{Error, Result};
use crate::expfit::{fit_exponentials, ExpModes};
use crate::gpe::{write_series, GpeRun, Grid3D, SeriesSample};
use crate::hops::{
    converge_depth, ensemble_average, fit_tau, nm_initial_pair, non_markovianity, rho_sp, sup_diff,
    EnsembleResult, EnsembleSettings, NoiseSource, SystemModel, TimeGrid,
};
use crate::io::{sha256_file, write_atomic, write_table};
use crate::params::{Config, FrameFormat, NoiseMethod};
use crate::stochastic::{
    ensemble_spectral, generate_from_modes, spectral_components, validate_correlation, write_binary_many,
    ValidationReport,
};

pub const MANIFEST: &str = "manifest.json";

/// Memory times covered by the tabulated C(τ).
pub const CORRELATION_DECAYS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Path relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Config,
    /// Files read by the run, with checksums at the time of reading.
    #[serde(default)]
    pub inputs: Vec<OutputFile>,
    pub modules: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub steps: BTreeMap<String, u64>,
    pub wall_seconds: f64,
    pub finished_unix: u64,
    pub outputs: Vec<OutputFile>,
}

impl RunManifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }

    /// Recomputes every checksum under `dir` and lists the files that no
    /// longer match.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        let mut bad = Vec::new();
        for f in &self.outputs {
            let p = dir.join(&f.path);
            if !p.exists() || sha256_file(&p)? != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}

fn file_entry(path: &Path, name: String) -> Result<OutputFile> {
    let bytes = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    Ok(OutputFile { path: name, sha256: sha256_file(path)?, bytes })
}

/// Bookkeeping for one run directory.
pub struct Run {
    dir: PathBuf,
    files: Vec<String>,
    inputs: Vec<OutputFile>,
    seeds: BTreeMap<String, u64>,
    steps: BTreeMap<String, u64>,
    start: Instant,
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Run {
            dir,
            files: Vec::new(),
            inputs: Vec::new(),
            seeds: BTreeMap::new(),
            steps: BTreeMap::new(),
            start: Instant::now(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path for output `name`, recorded for the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.dir.join(name)
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let entry = file_entry(path, path.display().to_string())?;
        self.inputs.push(entry);
        Ok(())
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.into(), value);
    }

    pub fn steps(&mut self, name: &str, value: u64) {
        self.steps.insert(name.into(), value);
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.output(name);
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    /// Checksums every output and writes the manifest last.
    pub fn finish(self, command: &str, config: &Config) -> Result<RunManifest> {
        let mut outputs = Vec::with_capacity(self.files.len());
        for name in &self.files {
            outputs.push(file_entry(&self.dir.join(name), name.clone())?);
        }
        let version = env!("CARGO_PKG_VERSION").to_string();
        let modules = ["params", "orbitals", "bath", "expfit", "stochastic", "hops", "gpe"]
            .iter()
            .map(|m| (m.to_string(), version.clone()))
            .collect();
        let manifest = RunManifest {
            command: command.into(),
            config: config.clone(),
            inputs: self.inputs,
            modules,
            seeds: self.seeds,
            steps: self.steps,
            wall_seconds: self.start.elapsed().as_secs_f64(),
            finished_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            outputs,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(self.dir.join(MANIFEST), &bytes)?;
        Ok(manifest)
    }
}

/// Fills in quantities that other settings imply. With
/// `grid.column_density_um2` set, ρ = ϱ₀/L_y. Idempotent.
pub fn resolve(cfg: &Config) -> Result<Config> {
    let mut cfg = cfg.clone();
    if let Some(col) = cfg.grid.column_density_um2 {
        let grid = Grid3D::from_config(&cfg)?;
        cfg.physics.bec_density = col * 1e12 / grid.l[1];
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct BathSummary {
    pub nu: u32,
    #[serde(rename = "T_dc")]
    pub t_dc: f64,
    #[serde(rename = "T_m")]
    pub t_m: f64,
    pub t_m_bounded: bool,
    pub total_weight: f64,
    pub richardson: f64,
    pub dtau: f64,
    pub lags: usize,
}

pub struct BathStage {
    pub spec: BathSpec,
    pub table: CorrelationTable,
    pub summary: BathSummary,
}

/// Couplings, spectral density and C(τ) tables plus the T_dc/T_m summary.
pub fn bath_stage(cfg: &Config, run: &mut Run) -> Result<BathStage> {
    let spec = BathSpec::build(&cfg.physics, &BathOptions::from_config(cfg))?;
    let td = spec.decoherence_time()?;
    let table = spec.auto_correlation(CORRELATION_DECAYS)?;
    let tm = memory_time(&table);
    write_table(
        run.output("bath_couplings.csv"),
        &["q [1/m]", "omega [rad/s]", "u", "v", "delta_kappa_rms*sqrt(V) [J m^1.5]"],
        (0..spec.q.len()).map(|i| [spec.q[i], spec.omega[i], spec.u[i], spec.v[i], spec.delta_kappa[i]]),
    )?;
    write_table(
        run.output("spectral_density.csv"),
        &["omega [rad/s]", "J [1/s]"],
        spec.omega.iter().zip(&spec.spectral).map(|(w, j)| [*w, *j]),
    )?;
    table.write_csv(run.output("correlation.csv"))?;
    let summary = BathSummary {
        nu: spec.nu,
        t_dc: td.t_dc,
        t_m: tm.value,
        t_m_bounded: tm.bounded,
        total_weight: td.total_weight,
        richardson: td.richardson,
        dtau: table.dtau,
        lags: table.len(),
    };
    run.json("bath_summary.json", &summary)?;
    Ok(BathStage { spec, table, summary })
}

pub fn fit_stage(cfg: &Config, table: &CorrelationTable, run: &mut Run) -> Result<ExpModes> {
    let modes = fit_exponentials(table, cfg.hops.max_modes, cfg.hops.fit_tolerance)?;
    run.json("modes.json", &modes)?;
    Ok(modes)
}

/// Generates `noise.validate_paths` paths on the C(τ) grid and checks the
/// ensemble correlation against the table.
pub fn noise_stage(
    cfg: &Config,
    stage: &BathStage,
    modes: Option<&ExpModes>,
    run: &mut Run,
) -> Result<ValidationReport> {
    let nc = &cfg.noise;
    let (dt, n) = (stage.table.dtau, stage.table.len());
    let paths = match nc.method {
        NoiseMethod::Spectral => {
            let comp = spectral_components(&stage.spec.modes(), dt, nc.prune)?;
            ensemble_spectral(&comp, dt, n, nc.seed, nc.validate_paths)
        }
        NoiseMethod::Modes => {
            let modes = modes.ok_or_else(|| Error::Precondition("mode-based noise needs fitted modes".into()))?;
            (0..nc.validate_paths as u64)
                .map(|s| generate_from_modes(modes, dt, n, nc.seed, s))
                .collect::<Result<Vec<_>>>()?
        }
    };
    run.seed("noise", nc.seed);
    let report = validate_correlation(&paths, &stage.table)?;
    write_table(
        run.output("noise_correlation.csv"),
        &["tau [s]", "Re C_est [s^-2]", "Im C_est [s^-2]", "SE [s^-2]", "Re C [s^-2]", "Im C [s^-2]"],
        (0..report.lags).map(|i| {
            let (e, r) = (report.estimate[i], stage.table.values[i]);
            [stage.table.tau(i), e.re, e.im, report.standard_error[i], r.re, r.im]
        }),
    )?;
    run.json("noise_validation.json", &report)?;
    if nc.dump_paths > 0 {
        let mut buf = Vec::new();
        write_binary_many(&mut buf, &paths[..nc.dump_paths.min(paths.len())])
            .map_err(|e| Error::Serde(e.to_string()))?;
        write_atomic(run.output("noise_paths.bin"), &buf)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct NoiseDump {
    pub paths: usize,
    pub samples: usize,
    pub dt: f64,
    pub seed: u64,
    pub file: &'static str,
}

/// Generates `noise.dump_paths` spectral paths (16 when unset) on the C(τ)
/// grid and writes them to `noise_paths.bin` without validating.
pub fn noise_dump(cfg: &Config, stage: &BathStage, run: &mut Run) -> Result<NoiseDump> {
    let nc = &cfg.noise;
    let count = if nc.dump_paths > 0 { nc.dump_paths } else { 16 };
    let (dt, n) = (stage.table.dtau, stage.table.len());
    let comp = spectral_components(&stage.spec.modes(), dt, nc.prune)?;
    let paths = ensemble_spectral(&comp, dt, n, nc.seed, count);
    run.seed("noise", nc.seed);
    let mut buf = Vec::new();
    write_binary_many(&mut buf, &paths).map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(run.output("noise_paths.bin"), &buf)?;
    let dump = NoiseDump { paths: count, samples: n, dt, seed: nc.seed, file: "noise_paths.bin" };
    run.json("noise_summary.json", &dump)?;
    Ok(dump)
}

#[derive(Debug, Clone, Serialize)]
pub struct HopsSummary {
    #[serde(rename = "tau_Omega")]
    pub tau_omega: f64,
    pub tau_over_t_dc: f64,
    pub tau_fit_rms: f64,
    pub tau_bounded: bool,
    #[serde(rename = "N")]
    pub n: Option<f64>,
    #[serde(rename = "N_se")]
    pub n_se: Option<f64>,
    #[serde(rename = "N_inconclusive")]
    pub n_inconclusive: Option<bool>,
    #[serde(rename = "D_used")]
    pub d_used: usize,
    pub depth_change: Option<f64>,
    pub rejection_rate: f64,
    pub ntraj: usize,
    pub modes: usize,
    pub dt: f64,
    pub steps: usize,
    #[serde(rename = "T_dc")]
    pub t_dc: f64,
}

pub struct HopsStage {
    pub result: EnsembleResult,
    pub summary: HopsSummary,
}

/// Propagation window: `hops.tmax_us`, else 2 T_dc undriven and 4 T_dc
/// driven.
pub fn hops_tmax(cfg: &Config, t_dc: f64) -> f64 {
    cfg.hops.tmax_us.map_or_else(|| if cfg.physics.rabi == 0.0 { 2.0 * t_dc } else { 4.0 * t_dc }, |t| t * 1e-6)
}

pub fn hops_stage(cfg: &Config, stage: &BathStage, modes: &ExpModes, run: &mut Run) -> Result<HopsStage> {
    let h = &cfg.hops;
    let t_dc = stage.summary.t_dc;
    let model = SystemModel::from_config(&cfg.physics)?;
    let grid = TimeGrid::new(&model, modes, hops_tmax(cfg, t_dc), h.n_out, h.dt_factor)?;
    let comp = spectral_components(&stage.spec.modes(), 0.5 * grid.dt, cfg.noise.prune)?;
    let noise = NoiseSource::Spectral(&comp);
    let settings = EnsembleSettings {
        ntraj: h.ntraj,
        seed: h.seed,
        depth: h.depth,
        hierarchy_cap: h.hierarchy_cap,
        max_rejection: h.max_rejection,
    };
    let (result, change) = if h.adaptive_depth {
        let (r, c) = converge_depth(&model, modes, noise, &grid, &settings, h.max_depth, h.depth_tol)?;
        (r, Some(c.change))
    } else {
        (ensemble_average(&model, modes, noise, &grid, &settings)?, None)
    };
    run.seed("hops", h.seed);
    run.steps("hops", grid.steps as u64);
    let coh = result.coherence();
    let fit = fit_tau(&result.t, &coh)?;
    write_table(
        run.output("hops.csv"),
        &[
            "t [s]",
            "Re rho_sp",
            "Im rho_sp",
            "rho_ss",
            "SE rho_sp",
            "SE rho_ss",
            "|rho_sp|/|rho_sp(0)|",
        ],
        (0..result.t.len()).map(|i| {
            let (r, se) = (&result.rho[i], &result.se[i]);
            let sp = rho_sp(r);
            [result.t[i], sp.re, sp.im, r[1][1].re, se[1][0], se[1][1], coh[i]]
        }),
    )?;
    let mut summary = HopsSummary {
        tau_omega: fit.tau,
        tau_over_t_dc: fit.tau / t_dc,
        tau_fit_rms: fit.rms,
        tau_bounded: fit.bounded,
        n: None,
        n_se: None,
        n_inconclusive: None,
        d_used: result.depth,
        depth_change: change,
        rejection_rate: result.rejection_rate(),
        ntraj: result.ntraj,
        modes: modes.len(),
        dt: grid.dt,
        steps: grid.steps,
        t_dc,
    };
    if h.non_markovianity {
        let (ps, pp) = nm_initial_pair();
        let s = EnsembleSettings { depth: result.depth, ..settings };
        let a = ensemble_average(&SystemModel { initial: ps, ..model }, modes, noise, &grid, &s)?;
        let b = ensemble_average(&SystemModel { initial: pp, ..model }, modes, noise, &grid, &s)?;
        let nm = non_markovianity(&a, &b, h.seed)?;
        write_table(
            run.output("trace_distance.csv"),
            &["t [s]", "D", "SE D"],
            (0..a.t.len()).map(|i| [a.t[i], nm.distance[i], nm.distance_se[i]]),
        )?;
        summary.n = Some(nm.value);
        summary.n_se = Some(nm.se);
        summary.n_inconclusive = Some(nm.inconclusive);
    }
    run.json("hops_summary.json", &summary)?;
    Ok(HopsStage { result, summary })
}

#[derive(Debug, Clone, Serialize)]
pub struct GpeSummary {
    pub nu: u32,
    pub grid: [usize; 3],
    pub box_m: [f64; 3],
    pub bec_density: f64,
    pub n_box: f64,
    pub dt: f64,
    pub steps: usize,
    #[serde(rename = "T_dc")]
    pub t_dc: f64,
    /// Background column density ρ L_y (m⁻²).
    pub rho0: f64,
    /// max_t ||r_GPE| − r_SBM|.
    pub sup_diff_sbm: f64,
    /// max|Δϱ| at t = 0, relative to ϱ₀.
    pub s0_rel: f64,
    pub s_peak_rel: f64,
    pub t_peak: f64,
    /// True when s is smaller at the last sample than at the peak.
    pub decays_after_peak: bool,
    pub frames: usize,
}

pub struct GpeStage {
    pub series: Vec<SeriesSample>,
    pub analytic: Vec<f64>,
    pub summary: GpeSummary,
}

/// Two-branch condensate evolution with a frame every `grid.gpe_stride`
/// steps and the |r| comparison against the bath model.
pub fn gpe_stage(cfg: &Config, bath: &BathSpec, t_dc: f64, run: &mut Run) -> Result<GpeStage> {
    let grid = Grid3D::from_config(cfg)?;
    let mut gpe = GpeRun::new(&cfg.physics, grid, cfg.grid.radial_points, None)?;
    let tmax = cfg.grid.gpe_tmax_us.map_or(2.0 * t_dc, |t| t * 1e-6);
    let steps = (tmax / gpe.dt).ceil() as usize;
    let rho0 = cfg.physics.bec_density * grid.l[1];
    let dt = gpe.dt;
    let format = cfg.output.format;
    let mut frames = 0;
    let series = gpe.evolve_pair(steps, cfg.grid.gpe_stride, |s, f, _, _| {
        let step = (s.t / dt).round() as usize;
        match format {
            FrameFormat::Csv => f.write_csv(run.output(&format!("frames/frame_{step:06}.csv")))?,
            FrameFormat::Pgm => {
                f.write_pgm(run.output(&format!("frames/frame_{step:06}.pgm")), rho0)?;
                run.output(&format!("frames/frame_{step:06}.json"));
            }
        }
        frames += 1;
        Ok(())
    })?;
    run.steps("gpe", steps as u64);
    write_series(run.output("gpe_series.csv"), &series)?;
    let analytic: Vec<f64> = series.iter().map(|s| bath.analytic_coherence(s.t)).collect();
    let r: Vec<f64> = series.iter().map(|s| s.r_abs).collect();
    let (ipk, peak) = series.iter().enumerate().fold((0, 0.0), |acc, (i, s)| if s.s > acc.1 { (i, s.s) } else { acc });
    let summary = GpeSummary {
        nu: cfg.physics.nu,
        grid: grid.n,
        box_m: grid.l,
        bec_density: cfg.physics.bec_density,
        n_box: gpe.n_box,
        dt,
        steps,
        t_dc,
        rho0,
        sup_diff_sbm: sup_diff(&r, &analytic),
        s0_rel: series[0].s / rho0,
        s_peak_rel: peak / rho0,
        t_peak: series[ipk].t,
        decays_after_peak: series.last().is_some_and(|l| l.s < peak),
        frames,
    };
    run.json("gpe_summary.json", &summary)?;
    Ok(GpeStage { series, analytic, summary })
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub bath: BathSummary,
    #[serde(rename = "M")]
    pub m: usize,
    pub fit_residual: f64,
    pub noise_pass: bool,
    pub noise_max_z: f64,
    pub hops: HopsSummary,
    pub gpe: GpeSummary,
    pub series: &'static str,
}

/// bath → fit → noise validation → HOPS, then GPE → imaging at the same
/// parameters. Returns the summary; `noise_pass` is false when validation
/// failed (the later stages still run).
pub fn pipeline(cfg: &Config, run: &mut Run) -> Result<PipelineSummary> {
    let bath = bath_stage(cfg, run)?;
    let modes = fit_stage(cfg, &bath.table, run)?;
    let report = noise_stage(cfg, &bath, Some(&modes), run)?;
    let hops = hops_stage(cfg, &bath, &modes, run)?;
    let gpe = gpe_stage(cfg, &bath.spec, bath.summary.t_dc, run)?;
    let summary = PipelineSummary {
        bath: bath.summary,
        m: modes.len(),
        fit_residual: modes.residual,
        noise_pass: report.pass,
        noise_max_z: report.max_z,
        hops: hops.summary,
        gpe: gpe.summary,
        series: "gpe_series.csv",
    };
    run.json("pipeline_summary.json", &summary)?;
    Ok(summary)
}

/// Subcommands understood by [`run_command`].
pub const COMMANDS: [&str; 7] = ["bath", "fit", "noise", "noise --validate", "hops", "gpe", "pipeline"];

#[derive(Debug, Clone)]
pub struct CommandOutcome {
    /// The JSON summary of the run.
    pub summary: serde_json::Value,
    /// False when a validation step (noise correlation) failed.
    pub validated: bool,
    pub manifest: RunManifest,
}

fn to_value<T: Serialize>(v: T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Serde(e.to_string()))
}

/// Runs `command` with a resolved config into `dir` and writes the
/// manifest. `input` is the correlation CSV for `fit`.
pub fn run_command(command: &str, cfg: &Config, input: Option<&Path>, dir: &Path) -> Result<CommandOutcome> {
    let mut run = Run::new(dir)?;
    let mut validated = true;
    let summary = match command {
        "bath" => to_value(bath_stage(cfg, &mut run)?.summary)?,
        "fit" => {
            let table = match input {
                Some(path) => {
                    run.input(path)?;
                    CorrelationTable::read_csv(path)?
                }
                None => bath_stage(cfg, &mut run)?.table,
            };
            to_value(fit_stage(cfg, &table, &mut run)?)?
        }
        "noise" => {
            let bath = bath_stage(cfg, &mut run)?;
            to_value(noise_dump(cfg, &bath, &mut run)?)?
        }
        "noise --validate" => {
            let bath = bath_stage(cfg, &mut run)?;
            let modes = match cfg.noise.method {
                NoiseMethod::Modes => Some(fit_stage(cfg, &bath.table, &mut run)?),
                NoiseMethod::Spectral => None,
            };
            let report = noise_stage(cfg, &bath, modes.as_ref(), &mut run)?;
            validated = report.pass;
            to_value(report)?
        }
        "hops" => {
            let bath = bath_stage(cfg, &mut run)?;
            let modes = fit_stage(cfg, &bath.table, &mut run)?;
            to_value(hops_stage(cfg, &bath, &modes, &mut run)?.summary)?
        }
        "gpe" => {
            let bath = bath_stage(cfg, &mut run)?;
            to_value(gpe_stage(cfg, &bath.spec, bath.summary.t_dc, &mut run)?.summary)?
        }
        "pipeline" => {
            let s = pipeline(cfg, &mut run)?;
            validated = s.noise_pass;
            to_value(s)?
        }
        other => return Err(Error::Input(format!("unknown command `{other}`"))),
    };
    let manifest = run.finish(command, cfg)?;
    Ok(CommandOutcome { summary, validated, manifest })
}

#[derive(Debug, Clone)]
pub struct RerunOutcome {
    pub outcome: CommandOutcome,
    /// Outputs whose checksum differs from the original manifest, or that
    /// only one of the two runs produced.
    pub mismatched: Vec<String>,
}

/// Repeats the run recorded in `manifest_path` into `dir` and compares
/// every output checksum with the original.
pub fn rerun(manifest_path: &Path, dir: &Path) -> Result<RerunOutcome> {
    let original = RunManifest::read(manifest_path)?;
    for f in &original.inputs {
        if sha256_file(&f.path)? != f.sha256 {
            return Err(Error::Input(format!("input {} changed since the original run", f.path)));
        }
    }
    let input = original.inputs.first().map(|f| PathBuf::from(&f.path));
    let outcome = run_command(&original.command, &original.config, input.as_deref(), dir)?;
    let mut mismatched = original.verify(dir)?;
    for f in &outcome.manifest.outputs {
        if !original.outputs.iter().any(|o| o.path == f.path) {
            mismatched.push(f.path.clone());
        }
    }
    Ok(RerunOutcome { outcome, mismatched })
}
