use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use signorini_core::runner::{self, ExperimentConfig, Workspace};

#[derive(Parser)]
#[command(name = "signorini", version, about = "Thin obstacle problem experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Multiplies every tolerance of the run.
    #[arg(long, global = true)]
    tol_scale: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve the discrete variational inequality.
    Solve,
    /// Classify free-boundary points and evaluate the radial functionals.
    Analyze,
    /// Build the hodograph atlas and its diagnostics.
    Hodograph,
    /// Regrid the Legendre transform, evaluate the equation and its limits.
    Legendre,
    /// Empirical Grushin constants.
    Grushin,
    /// Merge stage outputs into report.json and report_series.csv.
    Report,
    /// solve, analyze, hodograph, legendre, report.
    Pipeline,
}

fn run(cli: &Cli) -> signorini_core::Result<i32> {
    runner::init_threads(cli.threads)?;
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.tol_scale {
        cfg.tol_scale = s;
    }
    let out = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    let mut ws = Workspace::open(cfg, out)?;
    match cli.command {
        Command::Solve => runner::cmd_solve(&mut ws),
        Command::Analyze => runner::cmd_analyze(&mut ws),
        Command::Hodograph => runner::cmd_hodograph(&mut ws),
        Command::Legendre => runner::cmd_legendre(&mut ws),
        Command::Grushin => runner::cmd_grushin(&mut ws),
        Command::Report => runner::cmd_report(&mut ws),
        Command::Pipeline => runner::cmd_pipeline(&mut ws),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            runner::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
