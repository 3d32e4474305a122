use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use genrec_cli::config::check_stage_order;
use genrec_cli::{run, CliError, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "genrec", version, about = "Semantic-ID tokenization, generative recommenders and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; omitted means all defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Stages for `run-all`, replacing the configured list.
    #[arg(long, global = true, value_delimiter = ',')]
    stage: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Ingest or generate interactions, filter and split.
    Prepare,
    /// Train the residual-quantization tokenizer.
    TrainQuantizer,
    /// Assign semantic IDs with collision reallocation.
    Tokenize,
    /// Train the configured sequence model.
    Train,
    /// Score the trained model on the held-out split.
    Evaluate,
    /// Throughput sweep over timeline lengths.
    Bench,
    /// Every configured stage in order.
    RunAll,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> Result<(), CliError> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::from_toml("")?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.display().to_string();
    }
    let stages = match cli.command {
        Command::Prepare => vec![Stage::Prepare],
        Command::TrainQuantizer => vec![Stage::TrainQuantizer],
        Command::Tokenize => vec![Stage::Tokenize],
        Command::Train => vec![Stage::Train],
        Command::Evaluate => vec![Stage::Evaluate],
        Command::Bench => vec![Stage::Bench],
        Command::RunAll if cli.stage.is_empty() => cfg.stages.clone(),
        Command::RunAll => {
            let mut errors = Vec::new();
            let stages: Vec<Stage> = cli
                .stage
                .iter()
                .filter_map(|s| {
                    Stage::parse(s).or_else(|| {
                        errors.push(format!("--stage: unknown stage `{s}`"));
                        None
                    })
                })
                .collect();
            if let Err(e) = check_stage_order(&stages, cfg.family) {
                errors.push(e);
            }
            if !errors.is_empty() {
                return Err(CliError::Config(errors));
            }
            stages
        }
    };
    print!("{}", cfg.to_toml());
    run(&cfg, &stages, &mut std::io::stderr())?;
    Ok(())
}
