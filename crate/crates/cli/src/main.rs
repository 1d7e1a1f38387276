use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use qappp_cli::{run_stage, Outcome, Overrides, PipelineConfig, Stage};

/// Reference-less QA performance prediction pipeline.
#[derive(Debug, Parser)]
#[command(name = "qappp", version)]
struct Args {
    /// Stage to run.
    #[arg(value_enum)]
    stage: Stage,
    /// Pipeline configuration (TOML).
    #[arg(long, env = "QAPPP_CONFIG")]
    config: PathBuf,
    /// Rerun even though the stage's manifest was made from other inputs.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Model formula, e.g. "correct ~ QCat*SCons + Cert".
    #[arg(long)]
    formula: Option<String>,
    /// Category correctness threshold for the filtered evaluation.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args = Args::parse();
    let overrides = Overrides {
        seed: args.seed,
        formula: args.formula,
        threshold: args.threshold,
        test_fraction: args.test_fraction,
    };
    let result = PipelineConfig::load(&args.config, &overrides)
        .map_err(Into::into)
        .and_then(|config| run_stage(args.stage, &config, args.force));
    match result {
        Ok(Outcome::Ran) => {
            println!("{}: done", args.stage);
            ExitCode::SUCCESS
        }
        Ok(Outcome::UpToDate) => {
            println!("{}: up to date", args.stage);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
