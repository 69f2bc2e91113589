mod commands;
mod dgp_config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dosesens", version, about = "Sensitivity analysis for matched studies with continuous doses and binary outcomes")]
struct Cli {
    /// Worker threads; results do not depend on this value.
    #[arg(long, global = true, env = "DOSESENS_THREADS")]
    threads: Option<usize>,

    /// Write the JSON report here instead of standard output.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Worst-case p-value under the sharp null of no effect.
    SharpNull(commands::SharpNullArgs),
    /// Tests and confidence sets for the threshold attributable effect.
    Tae(commands::TaeArgs),
    /// Design sensitivity of a statistic under a simulated design.
    DesignSens(commands::DesignSensArgs),
    /// Simulated power of the sensitivity analysis.
    Power(commands::PowerArgs),
    /// Covariate balance table and randomization balance test.
    Balance(commands::BalanceArgs),
    /// Interior worst case of a continuous-outcome statistic, and its signomial program.
    DemoHardness(commands::DemoHardnessArgs),
    /// Structural diagnostics of a design file.
    Validate(commands::ValidateArgs),
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    if let Some(n) = cli.threads {
        anyhow::ensure!(n > 0, "--threads must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let (report, ok) = match cli.command {
        Command::SharpNull(a) => commands::sharp_null(a)?,
        Command::Tae(a) => commands::tae(a)?,
        Command::DesignSens(a) => commands::design_sens(a)?,
        Command::Power(a) => commands::power(a)?,
        Command::Balance(a) => commands::balance(a)?,
        Command::DemoHardness(a) => commands::demo_hardness(a)?,
        Command::Validate(a) => commands::validate(a)?,
    };
    report.emit(cli.out.as_deref())?;
    Ok(ok)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
