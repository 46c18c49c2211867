//! `hallulab`: synthesize data, generate benchmarks, train projectors, run
//! probes and score answers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "hallulab", version, about = "Desk-scale hallucination analysis lab")]
pub struct Cli {
    /// Seed for every stochastic step.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML configuration file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted paired image/text embedding dataset.
    Synth(SynthArgs),
    /// Generate benchmarks, negative captions or region instructions.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Train a projector under one of the alignment schedules.
    Train(TrainArgs),
    /// Run the linear ΔPerf probe or the caption cosine probe.
    Probe(ProbeArgs),
    /// Score yes/no answers against a QA set.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum GenCommand {
    /// Object-existence questions with sampled absent objects.
    Pope {
        /// Scene graphs, one JSON record per line.
        #[arg(long)]
        scenes: PathBuf,
        /// random, popular, adversarial or all.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        per_image: Option<usize>,
        /// Scene graphs for co-occurrence statistics (defaults to --scenes).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Attribute and relation questions from scene graphs.
    Vg {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        threshold: Option<usize>,
    },
    /// Entity and relation questions from knowledge-graph triples.
    Kg {
        /// Tab-separated head, relation, tail.
        #[arg(long)]
        triples: PathBuf,
        /// JSON object mapping entity names to visual handles.
        #[arg(long)]
        handles: PathBuf,
    },
    /// Insertion and removal negatives for annotated captions.
    Negcap {
        /// Caption records `{image_id, caption}` with `[object]` markup.
        #[arg(long)]
        captions: PathBuf,
        /// Scene graphs for co-occurrence statistics and present objects.
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Two-box region captioning instructions.
    Region {
        #[arg(long)]
        scenes: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScheduleArg {
    Separate,
    IntegratedFixed,
    IntegratedLearnable,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    /// Initial (learnable) or fixed contrastive weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Embedding dataset stem (defaults to <out>/planted).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Label file (defaults to <data>.labels.json).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub contrastive_epochs: Option<usize>,
    #[arg(long)]
    pub generation_epochs: Option<usize>,
    #[arg(long)]
    pub integrated_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeTask {
    Deltaperf,
    Cosine,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_enum)]
    pub task: ProbeTask,
    /// Embedding dataset stem (defaults to <out>/planted).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint stem (defaults to <out>/checkpoint).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Label file (defaults to <data>.labels.json).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Pre-projector feature stem; with --post, replaces --data/--checkpoint.
    #[arg(long, requires = "post")]
    pub pre: Option<PathBuf>,
    /// Post-projector feature stem.
    #[arg(long, requires = "pre")]
    pub post: Option<PathBuf>,
    /// Token embedding stem whose record ids are tokens.
    #[arg(long, requires = "captions")]
    pub tokens: Option<PathBuf>,
    /// Caption records `{image_id, caption}`.
    #[arg(long, requires = "tokens")]
    pub captions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// QA items, one JSON record per line.
    #[arg(long)]
    pub qa: PathBuf,
    /// Answer records `{item_id, transcript}`.
    #[arg(long)]
    pub answers: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.kind(), "message": e.to_string() })
            );
            ExitCode::from(1)
        }
    }
}
