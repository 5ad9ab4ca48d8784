//! Command-line front end: one subcommand per pipeline stage over a single
//! TOML config. Exit codes: 0 success, 1 usage, 2 data error, 3 numeric
//! failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use numis::pipeline::{self, PipelineConfig, Stage};

#[derive(Parser)]
#[command(
    name = "numis",
    version,
    about = "Weakly-supervised coin classification pipeline",
    long_about = "Runs the coin-classification pipeline stage by stage: segment raw \
two-sided photographs, mine and apply concept lexicons to descriptions, split, \
train ViT and CNN classifiers, evaluate, and explain predictions with saliency \
maps. Stages are resumable; completed stages with unchanged inputs are skipped."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StageArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Re-run the stage even when its inputs are unchanged.
    #[arg(long)]
    force: bool,
    /// Override the config seed for this invocation.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the bundled synthetic two-sided corpus and glyph lexicons.
    Fixture(StageArgs),
    /// Segment raw images into reverse-side crops.
    Prepare(StageArgs),
    /// Report the most frequent description tokens (lexicon candidates).
    Mine(StageArgs),
    /// Derive per-concept labels from descriptions via the lexicons.
    Label(StageArgs),
    /// Stratified train/val/test split of the label table.
    Split(StageArgs),
    /// Pretrain the transformer backbone on synthetic faces.
    Pretrain(StageArgs),
    /// Fine-tune the transformer on the labeled crops.
    TrainVit(StageArgs),
    /// Train one balanced binary CNN per concept.
    TrainCnn(StageArgs),
    /// Evaluate both model families on the test split.
    Eval(StageArgs),
    /// Saliency maps for test images under the trained transformer.
    Saliency(StageArgs),
    /// Aggregate evaluation metrics into a per-concept table.
    Report(StageArgs),
}

impl Command {
    fn split(self) -> (Stage, StageArgs) {
        match self {
            Command::Fixture(a) => (Stage::Fixture, a),
            Command::Prepare(a) => (Stage::Prepare, a),
            Command::Mine(a) => (Stage::Mine, a),
            Command::Label(a) => (Stage::Label, a),
            Command::Split(a) => (Stage::Split, a),
            Command::Pretrain(a) => (Stage::Pretrain, a),
            Command::TrainVit(a) => (Stage::TrainVit, a),
            Command::TrainCnn(a) => (Stage::TrainCnn, a),
            Command::Eval(a) => (Stage::Eval, a),
            Command::Saliency(a) => (Stage::Saliency, a),
            Command::Report(a) => (Stage::Report, a),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap's own exit codes disagree with ours; keep help/version at 0
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (stage, args) = cli.command.split();
    let mut config = match PipelineConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", e);
            return ExitCode::from(1);
        }
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    match pipeline::run_stage(&config, stage, args.force) {
        Ok(outcome) => {
            print!("{}", outcome.to_text());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
