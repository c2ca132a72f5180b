use clap::Parser;
use conflictlens::{run_pipeline, run_stage, ExperimentConfig, Stage};
use std::path::PathBuf;
use std::process::ExitCode;

/// Conflicting-input analysis pipeline over a trainable toy two-stream
/// transformer. Stages: gen, train, behave, probe, cluster, sweep,
/// classify, transfer, report (or `all` to run everything in order).
#[derive(Parser)]
#[command(name = "conflictlens", version)]
struct Cli {
    /// Stage to run, or `all`.
    stage: String,
    /// Path to a JSON experiment config; omit to use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config overrides, e.g. --set train.rho=0.9
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads for parallel stages (overrides config).
    #[arg(long)]
    threads: Option<usize>,
    /// Print the effective config (with overrides applied) and exit.
    #[arg(long)]
    print_config: bool,
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

fn run(cli: Cli) -> Result<(), conflictlens::HarnessError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for assignment in &cli.set {
        config.apply_override(assignment)?;
    }
    config.apply_env()?;
    if let Some(threads) = cli.threads {
        config.threads = threads;
    }
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&config).unwrap());
        println!("run id: {}", config.hash());
        return Ok(());
    }

    if cli.stage == "all" {
        run_pipeline(&config)?;
        println!("pipeline complete: {}", config.out_dir.display());
        return Ok(());
    }
    let stage = Stage::parse(&cli.stage).ok_or_else(|| {
        conflictlens::HarnessError::Config(format!(
            "unknown stage '{}'; expected one of gen/train/behave/probe/cluster/sweep/classify/transfer/report/all",
            cli.stage
        ))
    })?;
    run_stage(stage, &config)?;
    println!("stage {} complete: {}", stage.name(), config.out_dir.display());
    Ok(())
}
