//! `fedlrgd`: dataset generation, algorithm runs, bound verification and
//! complexity sweeps.

mod commands;
mod config;
mod error;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_phi_list, Config};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "fedlrgd", version, about = "Federated low-rank gradient descent laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Communication ratios for Γ, comma separated.
    #[arg(long, global = true)]
    phi: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded uniform dataset as CSV plus a JSON header.
    Generate,
    /// Run an algorithm and write its JSON record.
    Run {
        #[arg(value_parser = ["fedlrgd", "fedave"])]
        algorithm: String,
    },
    /// Check a bound numerically; exit 1 if any instance fails.
    Verify {
        #[arg(value_parser = verify::SUITES)]
        suite: String,
    },
    /// Tabulate the FedLRGD/FedAve complexity ratio along the default regime.
    Sweep,
}

fn effective_config(common: &Common) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    if let Some(list) = &common.phi {
        cfg.phi = Some(parse_phi_list(list).map_err(|e| CliError::Config(format!("--phi: {e}")))?);
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli.common)?;
    let out = &cli.common.out;
    match &cli.command {
        Command::Generate => {
            let h = commands::cmd_generate(&cfg, out)?;
            println!("wrote {} rows (d={}, m={}, s={}, r={})", h.n, h.d, h.m, h.s, h.r);
        }
        Command::Run { algorithm } => {
            let rec = commands::cmd_run(algorithm, &cfg, out)?;
            for g in &rec.gamma {
                println!("phi={} gamma={}", g.phi, g.gamma);
            }
            if let Some(f) = rec.f_trace.last() {
                println!("final F={f} |grad|={}", rec.final_grad_norm);
            }
        }
        Command::Verify { suite } => {
            let report = verify::run_suite(suite, &cfg)?;
            let text = serde_json::to_string_pretty(&report).map_err(fedlrgd_core::FedError::from)?;
            std::fs::create_dir_all(out)?;
            std::fs::write(out.join(format!("verify_{suite}.json")), &text)?;
            commands::write_echo(&cfg, out)?;
            let failed: Vec<_> = report.failures().collect();
            println!(
                "{suite}: {} of {} instances pass",
                report.instances.len() - failed.len(),
                report.instances.len()
            );
            if !report.pass {
                for inst in failed {
                    eprintln!("FAIL {}: measured {} vs bound {}", inst.label, inst.measured, inst.bound);
                }
                return Err(CliError::SuiteFailed(suite.clone()));
            }
        }
        Command::Sweep => print!("{}", commands::cmd_sweep(&cfg, out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
