use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hdlr::freenergy::fe_curve;
use hdlr::harness::output::{
    mse_bound_rows, noise_bound_rows, spectrum_rows, write_fe_curve, write_json, write_mse_bounds,
    write_noise_bounds, write_spectrum,
};
use hdlr::harness::{compare_report, run_trials, run_trials_with, ExperimentConfig, Observables};
use hdlr::{Error, Result};

#[derive(Parser)]
#[command(name = "hdlr", version, about = "Simulate high-dimensional Bayesian linear regression and compare with closed forms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that override fields of the config file.
#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
}

impl Overrides {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BoundKind {
    Noise,
    Mse,
}

#[derive(Subcommand)]
enum Command {
    /// Run the trial ensemble and write aggregate moments as JSON.
    Simulate {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run named checks and write reports as JSON; exits 1 if any check fails.
    Compare {
        #[command(flatten)]
        cfg: Overrides,
        /// Comma-separated check names, or `all`. Defaults to the config's `checks`.
        #[arg(long, value_delimiter = ',')]
        checks: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Asymptotic free-energy curves as CSV.
    FeCurve {
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        zeta: Vec<f64>,
        #[arg(long, default_value_t = 0.01)]
        tmin: f64,
        #[arg(long, default_value_t = 12.0)]
        tmax: f64,
        /// Points of the linear grid; every `1/zeta` inside `[tmin, tmax]` is added to it.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long = "sigma0-sq", default_value_t = 1.0)]
        sigma0_sq: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pooled eigenvalue histogram of the ensemble against the Marchenko-Pastur density.
    Spectrum {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tail bounds against empirical deviation frequencies.
    Bounds {
        #[command(flatten)]
        cfg: Overrides,
        #[arg(long, value_enum)]
        kind: BoundKind,
        #[arg(long, value_delimiter = ',', required = true)]
        delta: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn temperature_grid(zetas: &[f64], tmin: f64, tmax: f64, steps: usize) -> Result<Vec<f64>> {
    if !(tmin > 0.0 && tmax > tmin && steps >= 2) {
        return Err(Error::Config("need 0 < tmin < tmax and steps >= 2".into()));
    }
    let mut grid: Vec<f64> = (0..steps).map(|i| tmin + (tmax - tmin) * i as f64 / (steps - 1) as f64).collect();
    grid.extend(zetas.iter().map(|z| 1.0 / z).filter(|t| (tmin..=tmax).contains(t)));
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    Ok(grid)
}

/// Returns whether every check passed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate { cfg, out } => {
            let cfg = cfg.load()?;
            write_json(sink(out.as_deref())?, &run_trials(&cfg)?)?;
        }
        Command::Compare { cfg, checks, out } => {
            let mut cfg = cfg.load()?;
            if let Some(c) = checks {
                cfg.checks = c;
            }
            if cfg.checks.is_empty() {
                return Err(Error::Config("no checks requested".into()));
            }
            let reports = compare_report(&cfg)?;
            write_json(sink(out.as_deref())?, &reports)?;
            return Ok(reports.iter().all(|r| r.passed()));
        }
        Command::FeCurve { zeta, tmin, tmax, steps, sigma0_sq, out } => {
            let grid = temperature_grid(&zeta, tmin, tmax, steps)?;
            let pts = fe_curve(&zeta, &grid, sigma0_sq).map_err(|e| match e {
                Error::Domain(m) => Error::Config(m),
                other => other,
            })?;
            write_fe_curve(sink(out.as_deref())?, &pts)?;
        }
        Command::Spectrum { cfg, bins, out } => {
            let cfg = cfg.load()?;
            let obs = Observables { spectrum: true, ..Observables::default() };
            let data = run_trials_with(&cfg, obs, 0)?;
            let pooled: Vec<f64> = data.spectra().concat();
            write_spectrum(sink(out.as_deref())?, &spectrum_rows(&pooled, cfg.zeta(), bins)?)?;
        }
        Command::Bounds { cfg, kind, delta, out } => {
            let cfg = cfg.load()?;
            let data = run_trials_with(&cfg, Observables::default(), 0)?;
            let w = sink(out.as_deref())?;
            match kind {
                BoundKind::Noise => write_noise_bounds(w, &noise_bound_rows(&cfg, &data, &delta)?)?,
                BoundKind::Mse => write_mse_bounds(w, &mse_bound_rows(&cfg, &data, &delta)?)?,
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            // Out-of-range deltas and similar are bad input, not numerical failures.
            let usage = e.is_usage() || matches!(e, Error::DeltaOutOfRange { .. } | Error::AlphaOutOfRange { .. });
            ExitCode::from(if usage { 2 } else { 3 })
        }
    }
}
