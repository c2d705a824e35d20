use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use gridloop::bench::run_scenario;
use gridloop::output::{aggregate, emit};
use gridloop::runner::RunOptions;
use gridloop::scenario::{ScenarioError, ScenarioSpec, VifSimMode};
use gridloop::signals::install_stop_flag;

#[derive(Parser)]
#[command(name = "gridloop", version, about = "Software-in-the-loop grid/ICT co-simulation runner")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write report.csv, report.json and the plots.
    Run {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Replace the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// One vif-sim for all containers.
        #[arg(long)]
        mux: bool,
        /// Real TUN devices instead of the loopback transport (needs
        /// CAP_NET_ADMIN).
        #[arg(long)]
        real_tun: bool,
        /// Directory of the vif, vif-sim and test app executables.
        #[arg(long)]
        bin_dir: Option<PathBuf>,
    },
    /// Check a scenario and list every problem.
    Validate { scenario: PathBuf },
}

fn load(path: &PathBuf, seed: Option<u64>) -> anyhow::Result<ScenarioSpec> {
    let mut spec = ScenarioSpec::load(path)?;
    if seed.is_some() {
        spec.seed = seed;
    }
    Ok(spec)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> anyhow::Result<bool> {
    match Cli::parse().cmd {
        Cmd::Validate { scenario } => {
            let spec = load(&scenario, None)?;
            match spec.check() {
                Ok(()) => {
                    println!("{}: ok", scenario.display());
                    Ok(true)
                }
                Err(ScenarioError::Invalid(errs)) => {
                    for e in errs {
                        println!("{}: {e}", scenario.display());
                    }
                    Ok(false)
                }
                Err(e) => Err(e.into()),
            }
        }
        Cmd::Run { scenario, out, seed, mux, real_tun, bin_dir } => {
            install_stop_flag();
            let spec = load(&scenario, seed)?;
            let mut opts = RunOptions { real_tun, ..RunOptions::default() };
            if mux {
                opts.mode = Some(VifSimMode::Mux);
            }
            if let Some(d) = bin_dir {
                opts.bin_dir = d;
            }
            let report = run_scenario(&spec, &opts).with_context(|| format!("running {}", scenario.display()))?;
            let files = emit(&report, &out)?;
            for a in aggregate(&report.samples) {
                println!(
                    "{:<16} n={:<4} samples={:<4} mean={:.3} sd={:.3} min={:.3} max={:.3} {}",
                    a.measurement.as_str(),
                    a.node_count,
                    a.n,
                    a.mean,
                    a.sd,
                    a.min,
                    a.max,
                    a.measurement.unit()
                );
            }
            for c in report.checks.iter().filter(|c| !c.ok) {
                println!("FAILED {}: {}", c.name, c.detail);
            }
            println!(
                "{} checks, {} failed; {:.3} wall ms per simulated ms",
                report.checks.len(),
                report.checks.iter().filter(|c| !c.ok).count(),
                report.wall_ms_per_sim_ms()
            );
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(report.passed())
        }
    }
}
