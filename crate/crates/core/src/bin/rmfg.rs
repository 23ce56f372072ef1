use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rmfg::cli::{acceptance, diff_runs, run, ExperimentConfig, Pipeline, RunOptions};
use rmfg::Error;

#[derive(Parser)]
#[command(name = "rmfg", version, about = "Regime-switching mean-field game experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: hardware parallelism).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory; RMFG_OUT takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    Validate(RunArgs),
    SolveLq(RunArgs),
    SolveFbsde(RunArgs),
    SolvePde(RunArgs),
    Simulate(RunArgs),
    Chaos(RunArgs),
    NashGap(RunArgs),
    FullLqAcceptance(RunArgs),
    /// Compare two runs by their manifests.
    Diff { a: PathBuf, b: PathBuf },
}

fn is_config_error(e: &Error) -> bool {
    matches!(e, Error::Config { .. } | Error::MissingFile(_))
}

fn execute(pipeline: Pipeline, args: RunArgs) -> Result<(), Error> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if args.seed.is_some() {
        config.seed = args.seed;
    }
    let out = std::env::var_os("RMFG_OUT")
        .map(PathBuf::from)
        .or(args.out)
        .or_else(|| config.out.clone())
        .unwrap_or_else(|| PathBuf::from("rmfg-out").join(pipeline.name()));
    let manifest = run(&config, pipeline, &RunOptions { out: out.clone(), threads: args.threads })?;
    for f in &manifest.files {
        println!("{}  {}", &f.sha256[..16], out.join(&f.path).display());
    }
    if pipeline == Pipeline::FullLqAcceptance {
        let text = std::fs::read_to_string(out.join("acceptance.csv"))?;
        for v in acceptance::verdicts(&text, &manifest)? {
            let verdict = if v.passed() { "PASS" } else { "FAIL" };
            let secs = v.seconds.unwrap_or(f64::NAN);
            println!("criterion {}: {verdict} ({secs:.1}s) {}", v.id, v.failed_checks.join(" "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (pipeline, args) = match cli.command {
        Command::Diff { a, b } => {
            return match diff_runs(&a, &b) {
                Ok(report) => {
                    print!("{report}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            };
        }
        Command::Validate(a) => (Pipeline::Validate, a),
        Command::SolveLq(a) => (Pipeline::SolveLq, a),
        Command::SolveFbsde(a) => (Pipeline::SolveFbsde, a),
        Command::SolvePde(a) => (Pipeline::SolvePde, a),
        Command::Simulate(a) => (Pipeline::Simulate, a),
        Command::Chaos(a) => (Pipeline::Chaos, a),
        Command::NashGap(a) => (Pipeline::NashGap, a),
        Command::FullLqAcceptance(a) => (Pipeline::FullLqAcceptance, a),
    };
    match execute(pipeline, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 3 })
        }
    }
}
