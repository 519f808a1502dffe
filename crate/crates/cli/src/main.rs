//! `qgles`: spin-up, DNS, dataset extraction, training and closure
//! evaluation for forced 2D QG turbulence.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical divergence in
//! a required run, 1 anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use qgles::config::{parse_closure_list, RunConfig};
use qgles::runner::{self, exit_code, EXIT_CONFIG};
use qgles::{QgError, Result};

#[derive(Parser, Debug)]
#[command(name = "qgles", version, about = "Forced 2D QG turbulence with learned subgrid closures")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides `seed` in the configuration.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Spin up from random modes at |k| = 4 and write spinup.qgf.
    Spinup,
    /// Integrate the DNS from a snapshot, storing every delta-th state.
    Dns {
        #[arg(long, value_name = "PATH")]
        initial: Option<PathBuf>,
    },
    /// Build an LES-grid dataset from DNS trajectory manifests.
    MakeDataset {
        #[arg(long = "manifest", value_name = "PATH")]
        manifests: Vec<PathBuf>,
    },
    /// Train a CNN closure; writes closure.qgnn and train_log.csv.
    Train {
        #[arg(long, value_name = "PATH")]
        dataset: Option<PathBuf>,
    },
    /// Compare closures against the filtered DNS from one initial state.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        initial: Option<PathBuf>,
        /// zero, smagorinsky or LABEL:CHECKPOINT; repeatable.
        #[arg(long = "closure", value_name = "SPEC")]
        closures: Vec<String>,
    },
}

fn required(path: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone())
        .ok_or_else(|| QgError::Config(format!("no {what} given (flag or [paths] entry)")))
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| QgError::Config("--config PATH is required".into()))?;
    let mut cfg = RunConfig::load(&config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    let out: &Path = &out;
    match cli.command {
        Command::Spinup => {
            let s = runner::cmd_spinup(&cfg, out)?;
            println!("snapshot {}", s.snapshot.display());
            println!("t = {}  energy = {:.6e}  enstrophy = {:.6e}", s.t_final, s.energy, s.enstrophy);
            match (s.window_means, s.stationarity()) {
                (Some((a, b)), Some(r)) => println!(
                    "energy over last 20%: first half {a:.6e}, second half {b:.6e}, relative change {r:.3}"
                ),
                _ => println!("no stationarity window (spinup_steps too small)"),
            }
        }
        Command::Dns { initial } => {
            let initial = required(initial, &cfg.paths.initial, "initial snapshot")?;
            let s = runner::cmd_dns(&cfg, &initial, out)?;
            println!("stored {} states, manifest {}", s.stored, s.manifest.display());
        }
        Command::MakeDataset { manifests } => {
            let manifests = if manifests.is_empty() {
                cfg.paths.manifests.clone()
            } else {
                manifests
            };
            let s = runner::cmd_make_dataset(&cfg, &manifests, out)?;
            println!("dataset {} with segments {:?}", s.path.display(), s.segment_sizes);
        }
        Command::Train { dataset } => {
            let dataset = required(dataset, &cfg.paths.dataset, "dataset")?;
            let s = runner::cmd_train(&cfg, &dataset, out)?;
            match s.report.final_loss() {
                Some(l) => println!("final loss {l:.6e}, checkpoint {}", s.checkpoint.display()),
                None => println!("no epochs run, checkpoint {}", s.checkpoint.display()),
            }
        }
        Command::Evaluate { initial, closures } => {
            let initial = required(initial, &cfg.paths.initial, "initial snapshot")?;
            let list = if closures.is_empty() {
                cfg.evaluate.closures.clone()
            } else {
                closures
            };
            let specs = parse_closure_list(&list)?;
            let r = runner::cmd_evaluate(&cfg, &initial, &specs, out)?;
            println!(
                "coverage: {} LES steps x delta {} = {} DNS steps, t {} -> {}",
                r.coverage.les_steps, r.coverage.delta, r.coverage.dns_steps, r.coverage.t_start, r.coverage.t_end_dns
            );
            for run in &r.runs {
                println!("{}: {}", run.label, run.status);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
