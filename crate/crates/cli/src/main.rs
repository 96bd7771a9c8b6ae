use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "bcednet", version, about = "Binary convolutional encoder-decoder for character salience maps")]
struct Cli {
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true, env = "BCEDNET_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic labeled dataset.
    Render(RenderArgs),
    /// Write a randomly initialized model.
    Init(InitArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Run one image through a model and export salience maps.
    Infer(InferArgs),
    /// Pixel accuracy of a model on a dataset directory.
    Eval(EvalArgs),
    /// Time the real-valued and packed forward paths block by block.
    Bench(BenchArgs),
    /// Print a model's configuration and size accounting.
    Inspect(InspectArgs),
}

#[derive(Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from the undistorted preset: no rotation, shear, jitter or noise,
    /// white text on black.
    #[arg(long)]
    pub clean: bool,
    /// Canvas size; defaults to 32 128.
    #[arg(long, num_args = 2, value_names = ["HEIGHT", "WIDTH"])]
    pub size: Option<Vec<usize>>,
    #[arg(long)]
    pub min_len: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub scale: Option<Vec<f64>>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub aspect: Option<Vec<f64>>,
    /// Maximum rotation in degrees.
    #[arg(long)]
    pub rotation: Option<f64>,
    #[arg(long)]
    pub shear: Option<f64>,
    /// Maximum perspective corner displacement in pixels.
    #[arg(long)]
    pub corner_shift: Option<f64>,
    /// Per-glyph horizontal jitter as a fraction of the cell width.
    #[arg(long)]
    pub jitter: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub min_contrast: Option<f64>,
    #[arg(long)]
    pub blur: bool,
    /// Comma-separated faces: regular, bold.
    #[arg(long, value_delimiter = ',')]
    pub faces: Option<Vec<String>>,
}

#[derive(Args)]
pub struct InitArgs {
    /// Network config file, or `default` / `tiny`.
    #[arg(long, default_value = "default")]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    /// Network config file, or `default` / `tiny`. Ignored with `--resume`.
    #[arg(long, default_value = "default")]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_model: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.002)]
    pub lr: f64,
    /// Learning-rate multiplier applied after every epoch.
    #[arg(long, default_value_t = 0.9)]
    pub lr_decay: f64,
    /// Write the full training state here after every epoch.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint written by `--checkpoint`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// real, packed_unfolded or packed_folded.
    #[arg(long, default_value = "packed_folded")]
    pub mode: String,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "packed_folded")]
    pub mode: String,
    /// Print `class,pixels,correct,recall` rows instead of the table.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Seed for the rendered benchmark images.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: bool,
}

#[derive(Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub csv: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Render(a) => commands::render(a),
        Command::Init(a) => commands::init(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
