//! `attnforge` command-line tool.

mod commands;
mod inputs;
mod manifest;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use attnforge::backbone::{Family, Scale};
use attnforge::gradcheck::Target;

#[derive(Parser, Debug)]
#[command(name = "attnforge", version, about = "Build, train and inspect CNNs with SE/SA attention placements")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a backbone with a placement plan and write checkpoint, log, report and manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Show hook points, parameter counts and attention overhead.
    Inspect(InspectArgs),
    /// Write a synthetic train/test pair in the raw dataset format.
    GenData(GenDataArgs),
}

#[derive(Args, Debug, Clone)]
pub struct ModelArgs {
    /// Backbone family: vgg_mini, resnet_mini, inception_mini, densenet_mini, efficientnet_mini.
    #[arg(long)]
    pub family: Family,
    /// Plan file, or canonical:{baseline,v1,v2,v3}.
    #[arg(long, default_value = "canonical:baseline")]
    pub plan: String,
    /// Model scale: toy (32 px) or paper (224 px).
    #[arg(long, default_value_t = Scale::Toy)]
    pub scale: Scale,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Data source: a directory, a raw .atnd file, or `synthetic`.
    #[arg(long)]
    pub data: String,
    /// Separate evaluation set (needed when --data is a single set).
    #[arg(long)]
    pub eval_data: Option<String>,
    /// Samples per class for --data synthetic.
    #[arg(long, default_value_t = 200)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Adam learning rate for backbone parameters.
    #[arg(long, default_value_t = 1e-4)]
    pub lr_backbone: f64,
    /// Adam learning rate for attention parameters.
    #[arg(long, default_value_t = 6e-4)]
    pub lr_attention: f64,
    /// L2 penalty added to every gradient.
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// StepLR period in epochs.
    #[arg(long, default_value_t = 10)]
    pub step_size: usize,
    /// StepLR decay factor.
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    /// Early-stopping patience in epochs.
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    /// Training-set augmentation: none, dihedral8 or random_rot_flip.
    #[arg(long, default_value = "none")]
    pub augment: String,
    /// Record per-epoch wall time in the log (makes logs non-reproducible).
    #[arg(long)]
    pub record_wall_time: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    /// Data source: a directory, a raw .atnd file, or `synthetic`.
    #[arg(long)]
    pub data: String,
    /// Samples per class for --data synthetic.
    #[arg(long, default_value_t = 200)]
    pub n_per_class: usize,
    /// Seed for --data synthetic; defaults to the checkpoint's seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Output directory for report and manifest.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// ops, se, sa, model, or all.
    #[arg(long, default_value = "all")]
    pub target: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pass threshold on the max relative error.
    #[arg(long, default_value_t = attnforge::gradcheck::DEFAULT_TOL)]
    pub tol: f64,
    /// Central-difference step.
    #[arg(long, default_value_t = attnforge::gradcheck::DEFAULT_EPS)]
    pub eps: f64,
    /// Coordinates sampled per input for randomized checks (0 = all).
    #[arg(long, default_value_t = 24)]
    pub max_coords: usize,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Spatial input size; must match the scale.
    #[arg(long)]
    pub input_size: Option<usize>,
    /// Batch size used for the multiply-accumulate count.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Machine-readable output.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    pub n_per_class: usize,
    /// Image side in pixels (at least 16).
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; receives train.atnd and test.atnd.
    #[arg(long, default_value = ".")]
    pub out: std::path::PathBuf,
}

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments or configuration; exit 2.
    Usage(String),
    /// Runtime failure; exit 1.
    Runtime(String),
}

impl From<attnforge::Error> for Failure {
    fn from(e: attnforge::Error) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

pub type CmdResult = Result<(), Failure>;

pub fn parse_targets(s: &str) -> Result<Vec<Target>, Failure> {
    if s == "all" {
        return Ok(Target::ALL.to_vec());
    }
    s.split(',').map(|t| t.trim().parse::<Target>().map_err(Failure::Usage)).collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let result = inputs::thread_count().and_then(|threads| match cli.command {
        Command::Train(a) => commands::train(&a, &argv, threads),
        Command::Eval(a) => commands::eval(&a, &argv, threads),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::GenData(a) => commands::gen_data(&a, &argv, threads),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
