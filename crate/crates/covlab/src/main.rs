use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpm_covlab::commands::{self, Options, Setup};
use dpm_covlab::{verify, CliError, CliResult};

#[derive(Parser)]
#[command(name = "covlab", version, about = "Covariance estimators for diffusion models on Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 runs on the main thread.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl From<Common> for Options {
    fn from(c: Common) -> Self {
        Options { config: c.config, seed: c.seed, threads: c.threads, out: c.out }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the noise network and the configured second-moment heads.
    Train(Common),
    /// Negative ELBO of each configured model.
    EvalElbo(Common),
    /// Ancestral samples and sample-quality metrics.
    Sample(Common),
    /// Cost matrix and optimal trajectories.
    Trajectory(Common),
    /// Numerical self-checks; exits with 1 when any check fails.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write `verify.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[cfg(feature = "fault-injection")]
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Collect result tables in a directory into one long-format CSV.
    PlotData {
        dir: PathBuf,
        /// Defaults to `<dir>/plot_data.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => {
            for path in commands::train(&Setup::load(&c.into())?)? {
                println!("{}", path.display());
            }
        }
        Command::EvalElbo(c) => {
            for r in commands::eval_elbo(&Setup::load(&c.into())?)? {
                println!("{}\t{}\tK={}\t{}\t{:.6}\t±{:.6}", r.model, r.mode, r.k, r.trajectory, r.value, r.stderr);
            }
        }
        Command::Sample(c) => {
            let report = commands::sample(&Setup::load(&c.into())?)?;
            println!("{}", serde_json::to_string_pretty(&report.metrics)?);
        }
        Command::Trajectory(c) => {
            let report = commands::trajectory(&Setup::load(&c.into())?)?;
            for t in &report.trajectories {
                println!("K={}\t{:.6}\t{:?}", t.k, t.optimal_cost, t.optimal);
            }
        }
        Command::Verify {
            seed,
            out,
            #[cfg(feature = "fault-injection")]
            inject_fault,
        } => {
            #[cfg(feature = "fault-injection")]
            match inject_fault.as_deref() {
                None => {}
                Some("gamma-sign") => dpm_covlab_core::fault::set_gamma_sign_flip(true),
                Some(other) => return Err(CliError::config(format!("unknown fault {other:?}"))),
            }
            let report = verify::run(seed);
            let text = serde_json::to_string_pretty(&report)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("verify.json"), &text)?;
            }
            println!("{text}");
            if !report.passed {
                return Err(CliError::Verification(report.failed().join(", ")));
            }
        }
        Command::PlotData { dir, out } => {
            let out = out.unwrap_or_else(|| dir.join("plot_data.csv"));
            let rows = commands::plot_data(&dir, &out)?;
            println!("{} rows written to {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DPM_COVLAB_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
