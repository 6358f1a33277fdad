mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use saderkit::dresample::GuideKind;
use saderkit::trainer::AblationGrid;
use saderkit::Error;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "saderkit", version, about = "Multi-temporal cloud removal with a conditional diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, short = 'c')]
    pub config: Option<PathBuf>,
    /// Override any field by dotted path, e.g. `--set sampler.steps=5`.
    #[arg(long = "set", value_name = "PATH=VALUE", value_parser = config::parse_override)]
    pub set: Vec<(String, Value)>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset split.
    Synth(SynthArgs),
    /// Train the denoiser on a dataset split.
    Train(TrainArgs),
    /// Train the masked-autoencoder prior used by the `mae` guide.
    TrainMae(TrainMaeArgs),
    /// Run the sampler on a split and write per-scene predictions.
    Sample(SampleArgs),
    /// Score a prediction directory against a split.
    Eval(EvalArgs),
    /// Train and evaluate a grid of variants.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub coverage: Option<f32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write auxiliary structure channels.
    #[arg(long)]
    pub aux: bool,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Replace an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Directory containing `manifest.json`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent of the run directory (default `runs`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainMaeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out split for the reconstruction loss.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum GuideArg {
    None,
    Mean,
    Conv,
    Mae,
}

impl From<GuideArg> for GuideKind {
    fn from(g: GuideArg) -> Self {
        match g {
            GuideArg::None => GuideKind::None,
            GuideArg::Mean => GuideKind::Mean,
            GuideArg::Conv => GuideKind::Conv,
            GuideArg::Mae => GuideKind::Mae,
        }
    }
}

#[derive(Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of noise levels N.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Resampling rounds per level N_r.
    #[arg(long)]
    pub resample: Option<usize>,
    #[arg(long, value_enum)]
    pub guide: Option<GuideArg>,
    /// Fraction of pixels re-examined per round T_h.
    #[arg(long)]
    pub th: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frozen MAE checkpoint for `--guide mae`.
    #[arg(long)]
    pub mae: Option<PathBuf>,
    /// Scenes processed per sampler call.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Only the first N scenes.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Directory written by `sample`.
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `report.json` and `per_sample.csv` (default: the prediction directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum GridArg {
    Architecture,
    Loss,
    Sampler,
    Guide,
}

impl From<GridArg> for AblationGrid {
    fn from(g: GridArg) -> Self {
        match g {
            GridArg::Architecture => AblationGrid::Architecture,
            GridArg::Loss => AblationGrid::Loss,
            GridArg::Sampler => AblationGrid::Sampler,
            GridArg::Guide => AblationGrid::Guide,
        }
    }
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_enum)]
    pub grid: GridArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub eval_data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub mae: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Data { .. } | Error::Io(_) | Error::Shape(_) | Error::OutOfRange(_) => 3,
        Error::Numeric(_) | Error::Tensor(_) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::TrainMae(a) => commands::train_mae(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
