//! `meshmodes`: dataset generation, encoding, training, component export,
//! evaluation, editing and serving.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use meshmodes::pipeline::SplitRule;

use crate::error::{CliError, CliResult};

const CONFIG_HELP: &str = "\
Config file (--config): one JSON object. Keys are every training field
(lambda1, lambda2, theta, d1, d2, kz0, kz1, learning_rate, decay, decay_steps,
batch_size, epochs, eps1, eps2, stop_gradient_through_residual,
center_update_every, seed, second_level, attention, strategy (\"joint\" or
\"separate\"), probe_level1, probe_level2) plus data, cache, checkpoint, out,
split, count, port and bar (the generator spec). Missing keys take defaults,
unknown keys are rejected and flags override the file.

Environment: MESHMODES_THREADS caps the number of worker threads.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.";

#[derive(Parser, Debug)]
#[command(name = "meshmodes", version, about = "Multiscale localized deformation components for mesh collections")]
#[command(after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArg {
    /// JSON run configuration; flags take precedence over its values
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Directory of OBJ shapes sharing one connectivity; sorted by file name,
    /// the first shape is the reference
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Binary feature cache written by `encode`
    #[arg(long, value_name = "FILE")]
    pub cache: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct SplitArg {
    /// Train/test split: `every-nth:N` trains on shapes 0, N, 2N, ...;
    /// `ratio:R` trains on a fraction R spread evenly over the shapes
    /// [default: every-nth:10]
    #[arg(long, value_name = "RULE")]
    pub split: Option<SplitRule>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic bar dataset
    #[command(after_help = "Writes <out>/bar_NNN.obj for every shape and <out>/params.json with the generator \
                            spec, each shape's bend angle and bump height, and the ground-truth bend region and \
                            bump support vertex lists.")]
    Gen(GenArgs),
    /// Encode a dataset into a feature cache
    #[command(after_help = "The cache holds the scaled per-vertex features of every shape (little-endian f64 after \
                            a short header) and the fitted scaler as a JSON trailer.")]
    Encode(EncodeArgs),
    /// Train the two-level model and write a checkpoint
    #[command(after_help = "Outputs: the checkpoint (binary, checksummed), a loss log CSV with columns step, \
                            recon0, sparsity0, nontrivial0, recon_second, sparsity_second, nontrivial_second, total \
                            (default <checkpoint>.csv), and <checkpoint>.json with the resolved configuration and \
                            the training split.")]
    Train(TrainArgs),
    /// Export deformation components of a checkpoint
    #[command(
        after_help = "Writes one OBJ per kept component (l1_kNN.obj, l2_aNN_kNN.obj): the reference deformed by \
                            that single latent at its probe magnitude. index.json lists every raw component with its \
                            level, block, latent index, strength, kept flag, center vertex, active region and file \
                            (null when pruned). similarity.csv holds first-level cosine similarities."
    )]
    Components(ComponentsArgs),
    /// Reconstruct held-out shapes through a checkpoint
    #[command(after_help = "Writes <out>/<name>.obj for every test shape of the split.")]
    Recon(ReconArgs),
    /// Evaluate reconstructions against the ground-truth shapes
    #[command(after_help = "Without --recon the checkpoint reconstructs the test shapes of the split. With --recon \
                            every OBJ in that directory is compared to the data shape of the same name. Prints a \
                            table or JSON with per-shape e_rms and percentage error, overall e_rms, the worst \
                            percentage error and the simplified STED terms.")]
    Eval(EvalArgs),
    /// Deform the reference by slider weights or fit control points
    #[command(after_help = "Constraints file: JSON list of {\"vertex\": i, \"target\": [x, y, z], \"weight\": w} \
                            (weight defaults to 1). Weights file: JSON list of {\"level\": 1|2, \"ae\": block, \
                            \"index\": latent, \"value\": z}. Writes the mesh to --out and prints the solution \
                            (weights, residual, objective, iterations) as JSON.")]
    Edit(EditArgs),
    /// Serve the editing API over HTTP
    #[command(after_help = "Endpoints: GET /api/model, GET /api/reference, POST /api/decode, POST /api/fit. \
                            Without a checkpoint every endpoint answers 503.")]
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output directory for the shapes
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Number of shapes [default: 50]
    #[arg(long)]
    pub count: Option<usize>,
    /// Seed of the parameter jitter
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArg,
    /// Output checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Loss log CSV [default: <checkpoint>.csv]
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
    /// Training epochs [default: 3000]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed of initialization and batch shuffling
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ComponentsArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReconArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArg,
    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum)]
pub enum ReportFormat {
    #[default]
    Table,
    Json,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArg,
    /// Trained checkpoint; required unless --recon is given
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of reconstructed OBJs to compare against the data
    #[arg(long, value_name = "DIR")]
    pub recon: Option<PathBuf>,
    /// Also write the report as JSON to this file
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub format: ReportFormat,
}

#[derive(Args, Debug)]
#[group(id = "input", required = true, multiple = false, args = ["constraints", "weights"])]
pub struct EditArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Trained checkpoint
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Control points to fit
    #[arg(long, value_name = "FILE")]
    pub constraints: Option<PathBuf>,
    /// Slider weights to apply
    #[arg(long, value_name = "FILE")]
    pub weights: Option<PathBuf>,
    /// Output OBJ
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Checkpoint to serve; without one the endpoints answer 503
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Port [default: 7878]
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}

fn configure_threads() -> CliResult<()> {
    let Ok(value) = std::env::var("MESHMODES_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("MESHMODES_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("cannot configure {n} threads: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Encode(a) => commands::encode(a),
        Command::Train(a) => commands::train(a),
        Command::Components(a) => commands::components(a),
        Command::Recon(a) => commands::recon(a),
        Command::Eval(a) => commands::eval(a),
        Command::Edit(a) => commands::edit(a),
        Command::Serve(a) => commands::serve(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("meshmodes: {e}");
            ExitCode::from(e.code())
        }
    }
}
