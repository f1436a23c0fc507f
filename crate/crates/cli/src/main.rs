use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evinduce::pipeline::{self, RunConfig};

/// Overrides the config's output directory; `--output-dir` wins over it.
const OUTPUT_DIR_ENV: &str = "EVINDUCE_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "evinduce", version, about = "Event-type induction with contrastive batch attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset, name corpus and frame world from [synth].
    Synth(Common),
    /// Train one head per seed and write checkpoints and traces.
    Train(Common),
    /// Cluster the unseen rows with the trained heads.
    Cluster(Common),
    /// Score the clustering and run the configured rankings.
    Evaluate(Common),
    /// Rank type names against cluster centroids.
    RankNames(Common),
    /// Rank frame definitions against cluster centroids.
    RankFrames(Common),
    /// Metric table over every run and their ensemble.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Use exactly this training seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> evinduce::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.ensemble.seeds = vec![seed];
            cfg.ensemble.runs = None;
        }
        Ok(cfg)
    }
}

fn print<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("summary serializes"));
}

fn run(cli: Cli) -> evinduce::Result<()> {
    match cli.command {
        Command::Synth(c) => print(&pipeline::run_synth(&c.load()?)?),
        Command::Train(c) => print(&pipeline::run_train(&c.load()?)?),
        Command::Cluster(c) => print(&pipeline::run_cluster(&c.load()?)?),
        Command::Evaluate(c) => print(&pipeline::run_evaluate(&c.load()?)?),
        Command::RankNames(c) => print(&pipeline::run_rank_names(&c.load()?)?),
        Command::RankFrames(c) => print(&pipeline::run_rank_frames(&c.load()?)?),
        Command::Report(c) => print(&pipeline::run_report(&c.load()?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
