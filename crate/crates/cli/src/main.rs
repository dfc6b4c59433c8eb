use std::path::PathBuf;
use std::process::ExitCode;

use bff_cli::runner::{resolve_out_dir, synthetic_self_test};
use bff_cli::{CliError, Command, Input, RunOptions, Runner};
use bff_core::bias::DEFAULT_EPS;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bff", version, about = "Bellman residual policy evaluation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Experiment config (TOML). `compare` accepts it more than once.
    #[arg(long, global = true)]
    config: Vec<PathBuf>,

    /// Output directory; overrides the config and BFF_OUT_DIR.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Overrides `master_seed`. Limited to the TOML integer range.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
    seed: Option<u64>,

    /// Permit estimators that resample transitions from the model.
    #[arg(long, global = true)]
    allow_oracle: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a trajectory.
    Simulate,
    /// Solve a discrete chain exactly.
    SolveExact,
    /// Train every configured estimator.
    Train,
    /// Train and rank runs by final relative error.
    Compare,
    /// Measure how the BFF objective gap scales with the time step.
    BiasSweep {
        /// Check the power-law fitter on an exact quadratic series and exit.
        #[arg(long)]
        self_test: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let command = match cli.command {
        Cmd::Simulate => Command::Simulate,
        Cmd::SolveExact => Command::SolveExact,
        Cmd::Train => Command::Train,
        Cmd::Compare => Command::Compare,
        Cmd::BiasSweep { self_test: true } => {
            let eps = match cli.config.first() {
                Some(p) => Input::from_path(p)?
                    .config
                    .bias_sweep
                    .map(|b| b.eps)
                    .unwrap_or_else(|| DEFAULT_EPS.to_vec()),
                None => DEFAULT_EPS.to_vec(),
            };
            let slope = synthetic_self_test(&eps)?;
            println!("self-test ok: slope {slope:.12}");
            return Ok(());
        }
        Cmd::BiasSweep { self_test: false } => Command::BiasSweep,
    };
    if cli.config.is_empty() {
        return Err(CliError::Config("--config is required".into()));
    }
    let mut inputs = cli
        .config
        .iter()
        .map(|p| Input::from_path(p))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(seed) = cli.seed {
        for input in &mut inputs {
            input.config.master_seed = seed;
        }
    }
    let out_dir = resolve_out_dir(
        cli.out,
        &inputs[0].config,
        std::env::var_os("BFF_OUT_DIR").map(PathBuf::from),
    );
    let opts = RunOptions {
        out_dir,
        allow_oracle: cli.allow_oracle,
    };
    let report = Runner::new().run(command, &inputs, &opts)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(table) = &report.table {
        print!("{table}");
    }
    if let Some(s) = &report.sweep {
        println!("slope {:.4} (intercept {:.4})", s.slope, s.intercept);
        if let Some(c) = &s.control {
            println!(
                "control at eps={}: |gap| {:.3e} vs default {:.3e}",
                c.eps,
                c.gap.abs(),
                c.default_gap.abs()
            );
        }
    }
    for r in report.runs.iter().filter(|_| report.table.is_none()) {
        println!("{}: final relative error {:.4e}", r.label, r.final_relative);
    }
    println!(
        "wrote {} files to {}",
        report.outputs.len() + 1,
        report.out_dir.display()
    );
    Ok(())
}
