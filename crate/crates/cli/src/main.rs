use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rydeco::params::{mhz_to_rad, Config, FrameFormat};
use rydeco::pipeline::{self, CommandOutcome};
use rydeco::Error;

const EXIT_ERROR: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_CONFIG: u8 = 78;

/// Rydberg impurity qubit decoherence in a Bose condensate.
#[derive(Parser, Debug)]
#[command(name = "rydeco", version, arg_required_else_help = true)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bogoliubov couplings, spectral density, C(τ), T_dc and T_m.
    Bath(Common),
    /// Fit C(τ) by damped exponentials.
    Fit(FitArgs),
    /// Generate bath noise; with --validate check its correlation.
    Noise(NoiseArgs),
    /// Driven qubit dynamics from the nonlinear hierarchy of pure states.
    Hops(HopsArgs),
    /// Two-branch condensate evolution and imaging frames.
    Gpe(GpeArgs),
    /// bath → fit → noise → hops, then gpe at the same parameters.
    Pipeline(PipelineArgs),
    /// Repeat a run from its manifest and compare the checksums.
    Rerun(RerunArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// ν = 40, 128³ grid, 200 trajectories.
    Ci,
    /// ν = 80, 256³ grid, 1000 trajectories.
    Paper,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Output directory (default: output.dir of the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Principal quantum number.
    #[arg(long)]
    nu: Option<u32>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    /// Correlation CSV (τ, Re C, Im C); computed from the bath if omitted.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    max_modes: Option<usize>,
    /// Relative residual target.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Debug)]
struct NoiseArgs {
    #[command(flatten)]
    common: Common,
    /// Check the ensemble correlation against C(τ); exit 2 on failure.
    #[arg(long)]
    validate: bool,
    #[arg(long)]
    paths: Option<usize>,
    /// Paths written to noise_paths.bin.
    #[arg(long)]
    dump: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct HopsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    rabi_mhz: Option<f64>,
    #[arg(long)]
    detuning_mhz: Option<f64>,
    #[arg(long)]
    ntraj: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    tmax_us: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip the non-Markovianity ensembles.
    #[arg(long)]
    no_nm: bool,
    /// Raise the depth until the curve converges.
    #[arg(long)]
    adaptive_depth: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Pgm,
}

#[derive(Args, Debug)]
struct GpeArgs {
    #[command(flatten)]
    common: Common,
    /// Grid points per axis (power of two).
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    box_um: Option<f64>,
    #[arg(long)]
    tmax_us: Option<f64>,
    /// Steps between frames.
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Background column density ρ L_y (μm⁻²); sets ρ.
    #[arg(long)]
    column_density: Option<f64>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    rabi_mhz: Option<f64>,
    #[arg(long)]
    ntraj: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RerunArgs {
    manifest: PathBuf,
    /// Directory for the repeated run.
    #[arg(long)]
    out: PathBuf,
}

fn apply_preset(cfg: &mut Config, preset: Preset) {
    match preset {
        Preset::Ci => {
            cfg.physics.nu = 40;
            cfg.grid.gpe_points = 128;
            cfg.hops.ntraj = 200;
        }
        Preset::Paper => {
            cfg.physics.nu = 80;
            cfg.grid.gpe_points = 256;
            cfg.hops.ntraj = 1000;
        }
    }
}

/// defaults → preset → config file → RYDECO_* environment → flags.
fn base_config(c: &Common) -> anyhow::Result<Config> {
    let mut base = Config::default();
    if let Some(p) = c.preset {
        apply_preset(&mut base, p);
    }
    let mut cfg = match &c.config {
        Some(path) => {
            let src = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Config::layered(&base, &src, std::env::vars())?
        }
        None => Config::layered(&base, "", std::env::vars())?,
    };
    if let Some(nu) = c.nu {
        cfg.physics.nu = nu;
    }
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &Config) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

/// Resolves flags into (command, config, input, output directory).
fn job(cmd: Command) -> anyhow::Result<(&'static str, Config, Option<PathBuf>, PathBuf)> {
    let (name, common, mut cfg, input) = match cmd {
        Command::Bath(c) => {
            let cfg = base_config(&c)?;
            ("bath", c, cfg, None)
        }
        Command::Fit(a) => {
            let mut cfg = base_config(&a.common)?;
            set(&mut cfg.hops.max_modes, a.max_modes);
            set(&mut cfg.hops.fit_tolerance, a.tol);
            ("fit", a.common, cfg, a.input)
        }
        Command::Noise(a) => {
            let mut cfg = base_config(&a.common)?;
            set(&mut cfg.noise.validate_paths, a.paths);
            set(&mut cfg.noise.dump_paths, a.dump);
            set(&mut cfg.noise.seed, a.seed);
            let name = if a.validate { "noise --validate" } else { "noise" };
            (name, a.common, cfg, None)
        }
        Command::Hops(a) => {
            let mut cfg = base_config(&a.common)?;
            set(&mut cfg.physics.rabi, a.rabi_mhz.map(mhz_to_rad));
            set(&mut cfg.physics.detuning, a.detuning_mhz.map(mhz_to_rad));
            set(&mut cfg.hops.ntraj, a.ntraj);
            set(&mut cfg.hops.depth, a.depth);
            set(&mut cfg.hops.seed, a.seed);
            if a.tmax_us.is_some() {
                cfg.hops.tmax_us = a.tmax_us;
            }
            if a.no_nm {
                cfg.hops.non_markovianity = false;
            }
            if a.adaptive_depth {
                cfg.hops.adaptive_depth = true;
            }
            ("hops", a.common, cfg, None)
        }
        Command::Gpe(a) => {
            let mut cfg = base_config(&a.common)?;
            set(&mut cfg.grid.gpe_points, a.grid);
            set(&mut cfg.grid.gpe_stride, a.stride);
            if a.box_um.is_some() {
                cfg.grid.box_um = a.box_um;
            }
            if a.tmax_us.is_some() {
                cfg.grid.gpe_tmax_us = a.tmax_us;
            }
            if a.column_density.is_some() {
                cfg.grid.column_density_um2 = a.column_density;
            }
            set(
                &mut cfg.output.format,
                a.format.map(|f| match f {
                    Format::Csv => FrameFormat::Csv,
                    Format::Pgm => FrameFormat::Pgm,
                }),
            );
            ("gpe", a.common, cfg, None)
        }
        Command::Pipeline(a) => {
            let mut cfg = base_config(&a.common)?;
            set(&mut cfg.physics.rabi, a.rabi_mhz.map(mhz_to_rad));
            set(&mut cfg.hops.ntraj, a.ntraj);
            set(&mut cfg.hops.seed, a.seed);
            ("pipeline", a.common, cfg, None)
        }
        Command::Rerun(_) => unreachable!("handled by the caller"),
    };
    let dir = out_dir(&common, &cfg);
    cfg.output.dir = dir.display().to_string();
    cfg = pipeline::resolve(&cfg)?;
    Ok((name, cfg, input, dir))
}

fn report(outcome: &CommandOutcome, dir: &Path) -> anyhow::Result<u8> {
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    eprintln!("wrote {}", dir.join(pipeline::MANIFEST).display());
    Ok(if outcome.validated { 0 } else { EXIT_VALIDATION })
}

fn dispatch(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Rerun(a) => {
            let r = pipeline::rerun(&a.manifest, &a.out)?;
            let code = report(&r.outcome, &a.out)?;
            if r.mismatched.is_empty() {
                eprintln!("reproduced {} outputs bit-identically", r.outcome.manifest.outputs.len());
                Ok(code)
            } else {
                for m in &r.mismatched {
                    eprintln!("differs: {m}");
                }
                Ok(EXIT_VALIDATION)
            }
        }
        cmd => {
            let (name, cfg, input, dir) = job(cmd)?;
            let outcome = pipeline::run_command(name, &cfg, input.as_deref(), &dir)?;
            report(&outcome, &dir)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(e) if e.is_config() => EXIT_CONFIG,
        _ => EXIT_ERROR,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_ERROR);
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
