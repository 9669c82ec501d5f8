//! `koopman` — command-line front end for the identification-and-control
//! pipeline: collect snapshots, fit lifted models, benchmark predictions,
//! run closed-loop tracking, and check realizability of polynomial fields.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use koopman::basis::BasisFamily;
use koopman::error::Result;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "koopman",
    version,
    about = "Data-driven Koopman modelling and control for a three-link arm"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the arm under random torques and write a snapshot dataset.
    Collect {
        /// Experiment configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides the config key).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides the config key).
        #[arg(long)]
        seed: Option<u64>,
        /// Number of snapshots (overrides the config key).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Fit lifted models from a snapshot dataset and write model files.
    Fit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Snapshot CSV to fit from (default: <out>/snapshots.csv).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Restrict to one family: linear, bilinear or nonlinear.
        #[arg(long)]
        family: Option<String>,
        /// Dictionary degree; requires --family.
        #[arg(long)]
        rho: Option<u32>,
    },
    /// Fit the configured sweep and score every model on held-out episodes.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run a predictive controller against the simulated arm.
    Control {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Controller: kmpc, kbmpc or knmpc.
        #[arg(long)]
        controller: String,
        /// Model file (default: the fitted model matching the controller).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Reference CSV (default: generated block-M trajectory).
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Check linear/bilinear realizability of a polynomial vector field.
    Theory {
        /// Built-in fixture (linear, bilinear, quadratic, duffing) or a
        /// field file path.
        system: String,
        /// Dictionary degree to test.
        #[arg(long, default_value_t = 3)]
        rho: u32,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(
    config: Option<&PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config.map(PathBuf::as_path))?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<String>> {
    match cli.command {
        Command::Collect {
            config,
            out,
            seed,
            count,
        } => {
            let cfg = load_config(config.as_ref(), out, seed)?;
            commands::collect(&cfg, count)
        }
        Command::Fit {
            config,
            out,
            data,
            family,
            rho,
        } => {
            let cfg = load_config(config.as_ref(), out, None)?;
            let family = family
                .map(|f| f.parse::<BasisFamily>())
                .transpose()?;
            commands::fit(&cfg, data.as_deref(), family, rho)
        }
        Command::Eval {
            config,
            out,
            seed,
            data,
        } => {
            let cfg = load_config(config.as_ref(), out, seed)?;
            commands::eval(&cfg, data.as_deref())
        }
        Command::Control {
            config,
            out,
            seed,
            controller,
            model,
            reference,
        } => {
            let cfg = load_config(config.as_ref(), out, seed)?;
            commands::control(&cfg, &controller, model.as_deref(), reference.as_deref())
        }
        Command::Theory {
            system,
            rho,
            config,
            out,
        } => {
            let cfg = load_config(config.as_ref(), out, None)?;
            commands::theory(&cfg, &system, rho)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error code={} message={:?}", e.code(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
