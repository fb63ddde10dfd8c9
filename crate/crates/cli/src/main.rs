use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod error;
mod settings;

#[derive(Debug, Parser)]
#[command(name = "duoprompt", version, about = "Prompt-conditioned generalist segmentation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic eight-cell dataset.
    GenData(GenDataArgs),
    /// Train a model jointly on several cells.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one or all cells.
    Eval(EvalArgs),
    /// Report prompt pair correlations of a checkpoint.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Flat key=value config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed (falls back to $P2D_SEED, then 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train/test samples per cell, e.g. `50/20`.
    #[arg(long)]
    pub per_cell: Option<commands::PerCell>,
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for the checkpoint, log and snapshots.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub per_task_batch: Option<usize>,
    /// Steps between evaluation snapshots; 0 disables them.
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Model input size; samples are cropped to it.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Comma-separated `domain:task` list of training cells.
    #[arg(long)]
    pub cells: Option<String>,
    /// Remove a cell from the training list (repeatable).
    #[arg(long = "exclude-cell")]
    pub exclude_cell: Vec<String>,
    #[arg(long)]
    pub no_domain_prompts: bool,
    #[arg(long)]
    pub no_task_prompts_enc: bool,
    #[arg(long)]
    pub no_task_prompts_dec: bool,
    #[arg(long)]
    pub no_dis_loss: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Domain prompt to use; with `--task`, restricts evaluation to one cell.
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    /// Ignore auxiliary maps and use the rgb domain prompts.
    #[arg(long)]
    pub rgb_only: bool,
    /// `train` or `test`.
    #[arg(long)]
    pub split: Option<String>,
    /// Also write the JSON records to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Directory for `correlation.csv` and `pairs.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Analyze(a) => commands::analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
