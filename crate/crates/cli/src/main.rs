//! `tokenformer` command-line driver.

mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::TypedValueParser;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tokenformer::pattention::ScoreVariant;
use tokenformer::{Arm, InitPolicy};

#[derive(Parser, Debug)]
#[command(name = "tokenformer", version, about = "Train, scale, evaluate and cost Tokenformer language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model on a byte corpus and write a checkpoint plus a loss history CSV.
    Train(TrainArgs),
    /// Grow a Tokenformer checkpoint to a larger preset by appending zero-key parameter tokens.
    Scale(ScaleArgs),
    /// Report validation NLL and perplexity of a checkpoint on a byte file.
    Eval(EvalArgs),
    /// Compare backpropagated gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Parameter and FLOP costs over sequence lengths, as CSV.
    Cost(CostArgs),
    /// Train small models of both arms, expand them, continue, and write both loss histories.
    CompareNet2net(CompareArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Preset name or path to a preset JSON file.
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq: Option<usize>,
    /// Must agree with the preset's arm when given.
    #[arg(long)]
    pub arm: Option<Arm>,
    #[arg(long)]
    pub variant: Option<ScoreVariant>,
    /// Learnable gain and bias in every block layer norm.
    #[arg(long)]
    pub ln_affine: bool,
    /// Evaluate and checkpoint every this many steps; 0 only at the end.
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// History CSV path; defaults to the checkpoint path with `.history.csv` appended.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ScaleArgs {
    #[arg(long)]
    pub from: PathBuf,
    /// Preset name or path to a preset JSON file.
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Initialisation of the appended value rows: zeros, gaussian or gaussian:<std>.
    #[arg(long, default_value = "gaussian")]
    pub value_init: InitPolicy,
    /// Check the scaled model against the source on this many random sequences.
    #[arg(long)]
    pub verify: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Window length; defaults to the model's context size.
    #[arg(long)]
    pub seq: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Scope {
    Op,
    Layer,
    Model,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum)]
    pub scope: Scope,
    #[arg(long, default_value_t = 64, value_parser = clap::builder::PossibleValuesParser::new(["32", "64"]).map(|s| s.parse::<u32>().expect("listed values parse")))]
    pub bits: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CostArm {
    Both,
    Tokenformer,
    Transformer,
}

#[derive(Args, Debug)]
pub struct CostArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub arm: CostArm,
    /// Comma-separated sequence lengths.
    #[arg(long = "sweep-T", value_delimiter = ',', required = true)]
    pub sweep_t: Vec<u64>,
    /// Tokenformer presets to cost; defaults to the parameter-reuse ladder.
    /// Transformer rows use the width matching each preset's parameter count.
    #[arg(long, value_delimiter = ',')]
    pub preset: Vec<String>,
    /// Write to this file instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Steps before and again after expansion.
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) if exit::is_broken_pipe(&e) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e))
        }
    }
}
