use std::path::PathBuf;
use std::process::ExitCode;

use aaa_cli::{commands, Outcome, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "aaa",
    version,
    about = "Implied-vol approximations: g solves, smiles, MC validation, residual sweeps"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Solve the g ODE by Picard iteration and by marching.
    Gfun(Common),
    /// Formula smile over a strike grid.
    Smile(Common),
    /// Monte Carlo implied vols against the formula.
    Validate(Common),
    /// Drift-condition residual decay sweep.
    Residual(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides sim.seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let (common, f): (
        Common,
        fn(&RunConfig, &std::path::Path) -> anyhow::Result<Outcome>,
    ) = match cli.verb {
        Verb::Gfun(c) => (c, commands::cmd_gfun),
        Verb::Smile(c) => (c, commands::cmd_smile),
        Verb::Validate(c) => (c, commands::cmd_validate),
        Verb::Residual(c) => (c, commands::cmd_residual),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    f(&cfg, &common.out)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(o) => {
            for line in &o.summary {
                println!("{line}");
            }
            println!("wrote {}", o.csv.display());
            if o.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
