use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use raredrive::pipeline::{
    cmd_detect, cmd_embed, cmd_eval, cmd_featurize, cmd_generate, cmd_ingest, cmd_label, PipelineError, RunConfig,
};

#[derive(Debug, Parser)]
#[command(name = "raredrive", version, about = "Unsupervised detection of rare driving scenarios")]
struct Cli {
    /// Run configuration (TOML or JSON). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed every stage seed is derived from.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Directory for derived artifacts.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic driving dataset with injected rare scenarios.
    Generate,
    /// Validate the dataset and write an ingest report.
    Ingest,
    /// Window the measurements into the standardized feature table.
    Featurize,
    /// Apply the proxy rules to the feature table.
    Label,
    /// Fit and score IF and DIF on the feature table.
    Detect,
    /// Overlap table, score distributions, AUCs and top windows.
    Eval,
    /// t-SNE embedding of the feature table.
    Embed,
    /// Every stage from generate to embed.
    Run,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = Some(seed);
    }
    if let Some(dir) = &cli.data_dir {
        config.data_dir = dir.clone();
    }
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(PipelineError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| PipelineError::Internal(e.to_string()))?;
    }
    let config = resolve_config(cli)?;
    let eval = |config: &RunConfig| -> Result<(), PipelineError> {
        let summary = cmd_eval(config)?;
        print!("{}", summary.overlap.render());
        Ok(())
    };
    match cli.command {
        Command::Generate => cmd_generate(&config).map(drop),
        Command::Ingest => cmd_ingest(&config).map(drop),
        Command::Featurize => cmd_featurize(&config).map(drop),
        Command::Label => cmd_label(&config).map(drop),
        Command::Detect => cmd_detect(&config).map(drop),
        Command::Eval => eval(&config),
        Command::Embed => cmd_embed(&config).map(drop),
        Command::Run => {
            cmd_generate(&config)?;
            cmd_ingest(&config)?;
            cmd_featurize(&config)?;
            cmd_label(&config)?;
            cmd_detect(&config)?;
            eval(&config)?;
            cmd_embed(&config).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
