//! `u3spat`: command-line driver for spiral-sampling photoacoustic
//! simulation, reconstruction and evaluation.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use u3s::config::{Config, Preset};
use u3s::harness::{Method, SweepAxis};
use u3s::{Error, Result};

use crate::stages::Workspace;

#[derive(Parser)]
#[command(
    name = "u3spat",
    version,
    about = "Spiral-sampling multispectral photoacoustic tomography"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Config file overlaid on the preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base preset: desk or paper.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Network initialisation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "U3S_OUT", default_value = "u3s-out")]
    out: PathBuf,
    /// Override one config key, e.g. `--set training.iterations=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the phantom description and its concentration maps per slice.
    Phantom,
    /// Write the spiral acquisition schedule.
    Schedule,
    /// Simulate the sparse spiral sinograms.
    Acquire {
        /// Also simulate the dense all-wavelength centre slice.
        #[arg(long)]
        dense: bool,
    },
    /// Fuse the window around the centre slice into a prior image.
    Prior,
    /// Fit a fresh network to the prior image.
    Embed,
    /// Reconstruct every wavelength of the centre slice.
    Reconstruct {
        /// ds, ss, u3s or u3s-noprior.
        #[arg(long)]
        method: Method,
    },
    /// Unmix a reconstructed stack into HbO2 and Hb maps.
    Unmix {
        #[arg(long)]
        method: Method,
    },
    /// Score the reconstructed stacks against the dense reference.
    Evaluate,
    /// Run all methods in memory and report the ordering verdict.
    Compare,
    /// Vary one parameter and score the prior (and optionally U3S).
    Sweep {
        /// slice_spacing, num_elements, depth or width.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Score only the prior image; skip training.
        #[arg(long)]
        prior_only: bool,
    },
    /// Convert a U3SIMG1 image to 8-bit PNG (or PGM by extension).
    ExportPng { input: PathBuf, output: PathBuf },
    /// Print the resolved configuration.
    Config {
        #[arg(long)]
        dump: bool,
    },
}

fn resolve_config(g: &GlobalArgs) -> Result<Config> {
    let base = Config::preset(g.preset.unwrap_or(Preset::Desk));
    let mut cfg = match &g.config {
        Some(path) => Config::load(path, &base)?,
        None => base,
    };
    for item in &g.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {item:?}")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = g.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli.global)?;
    match cli.command {
        Command::Config { .. } => {
            print!("{}", config.to_toml());
            Ok(())
        }
        Command::ExportPng { input, output } => stages::export_png(&input, &output),
        command => {
            let ws = Workspace::new(&config, cli.global.out)?;
            u3s::harness::with_jobs(config.jobs, || match command {
                Command::Phantom => ws.phantom(),
                Command::Schedule => ws.schedule(),
                Command::Acquire { dense } => ws.acquire(dense),
                Command::Prior => ws.prior().map(drop),
                Command::Embed => ws.embed().map(drop),
                Command::Reconstruct { method } => ws.reconstruct(method).map(drop),
                Command::Unmix { method } => ws.unmix(method),
                Command::Evaluate => ws.evaluate(),
                Command::Compare => ws.compare(),
                Command::Sweep {
                    axis,
                    values,
                    prior_only,
                } => ws.sweep(axis, &values, !prior_only),
                Command::Config { .. } | Command::ExportPng { .. } => unreachable!(),
            })?
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
