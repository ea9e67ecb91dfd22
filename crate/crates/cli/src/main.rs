use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fwm_cli::commands;
use fwm_cli::config::RunConfig;
use fwm_cli::error::{CliError, Result};

#[derive(Parser)]
#[command(
    name = "fwm",
    version,
    about = "Model, simulate and analyze a cascade-decay photon-pair source"
)]
struct Cli {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (simulate only).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Override a configuration key, `key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Model rates and heralding efficiency over a grid of one knob.
    ModelSweep {
        /// delta, p776 or p780.
        #[arg(long)]
        axis: Option<String>,
        /// `start:stop:count` or a comma-separated list.
        #[arg(long, allow_hyphen_values = true)]
        grid: Option<String>,
    },
    /// G² histogram, τ fit, rates, efficiencies, CAR and brightness from time tags.
    Analyze {
        /// Tag file (binary, or CSV with a .csv extension).
        tags: Option<PathBuf>,
        /// Gating sidecar with `start_tick end_tick` lines.
        #[arg(long)]
        gating: Option<PathBuf>,
    },
    /// Synthetic time tags with ground truth.
    Simulate,
    /// Optical depth from a `detuning_mhz,transmission` scan.
    OdFit { scan: Option<PathBuf> },
    /// Fit tau_vs_od, eta_vs_od or linear_rate to `x,y[,sigma]` data.
    ScalingFit {
        data: Option<PathBuf>,
        #[arg(long)]
        law: Option<String>,
    },
    /// Rank operating points on a parameter grid.
    Optimize {
        /// brightness, eta or pair_rate.
        #[arg(long)]
        objective: Option<String>,
    },
}

fn run(cli: Cli) -> Result<String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            CliError::Io(m) => CliError::Config(m),
            e => e,
        })?,
        None => RunConfig::default(),
    };
    let mut flag = |key: &str, v: Option<String>| {
        if let Some(v) = v {
            cfg.set(key, v);
        }
    };
    let path = |p: Option<PathBuf>| p.map(|p| p.display().to_string());
    let command = match cli.command {
        Command::ModelSweep { axis, grid } => {
            flag("axis", axis);
            flag("grid", grid);
            commands::model_sweep
        }
        Command::Analyze { tags, gating } => {
            flag("tags", path(tags));
            flag("gating", path(gating));
            commands::analyze
        }
        Command::Simulate => commands::simulate,
        Command::OdFit { scan } => {
            flag("scan", path(scan));
            commands::od_fit
        }
        Command::ScalingFit { data, law } => {
            flag("data", path(data));
            flag("law", law);
            commands::scaling_fit
        }
        Command::Optimize { objective } => {
            flag("objective", objective);
            commands::optimize
        }
    };
    flag("seed", cli.seed.map(|s| s.to_string()));
    for o in &cli.overrides {
        cfg.set_override(o)?;
    }
    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::io(cli.out.display(), e))?;
    command(cfg, &cli.out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("fwm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
