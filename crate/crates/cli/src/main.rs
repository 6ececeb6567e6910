//! `celltwin`: simulate, generate fleets, calibrate, train, score and report.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "celltwin", version, about = "Lithium-ion cell digital twin pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a cycling protocol or reference discharges and write telemetry.
    Simulate(SimulateArgs),
    /// Generate a labeled synthetic fleet.
    GenData(GenDataArgs),
    /// Extract per-cycle features, optionally split by cell.
    Features(FeaturesArgs),
    /// Calibrate electrochemical-thermal parameters against reference discharges.
    Calibrate(CalibrateArgs),
    /// Train the SOH regressor.
    TrainSoh(TrainSohArgs),
    /// Predict SOH for feature rows.
    PredictSoh(PredictArgs),
    /// Train the uncertainty model.
    TrainUq(TrainUqArgs),
    /// Score feature rows with the uncertainty model.
    ScoreUq(PredictArgs),
    /// Summarise predictions and scores into metrics and plot tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Parameter file (TOML); the built-in reference cell when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Cycling schedule (TOML).
    #[arg(long, conflicts_with_all = ["family", "rates"])]
    pub protocol: Option<PathBuf>,
    /// Built-in schedule of a family tag.
    #[arg(long, conflicts_with = "rates")]
    pub family: Option<String>,
    /// Cycles of the built-in schedule.
    #[arg(long, default_value_t = 1)]
    pub cycles: u32,
    /// Constant-current discharges from full charge at these C-rates.
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    #[arg(long, default_value = "sim-c00")]
    pub cell_id: String,
    /// Time step (s).
    #[arg(long, default_value_t = 1.0)]
    pub dt: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Comma-separated family tags.
    #[arg(long, value_delimiter = ',', default_value = "C2,C3,R2_5,R3,RW,SAT")]
    pub families: Vec<String>,
    #[arg(long, default_value_t = 8)]
    pub cells: u32,
    #[arg(long, default_value_t = 300)]
    pub cycles: u32,
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Fleet directory or a single telemetry CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// SOH labels; defaults to the fleet's labels file.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Cycle count for `cycle_norm`; defaults to the fleet's, else the largest cycle + 1.
    #[arg(long)]
    pub max_cycle: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `train.csv` and `test.csv` here.
    #[arg(long)]
    pub split_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Reference telemetry: one constant-current discharge per (cell_id, cycle).
    #[arg(long)]
    pub data: PathBuf,
    /// Search space (TOML).
    #[arg(long)]
    pub space: PathBuf,
    /// Parameters outside the space; the built-in reference cell when omitted.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, default_value_t = 120)]
    pub budget: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Best parameter file (TOML).
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for history, overlay and summary.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainSohArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Training settings (TOML); defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Nominal capacity (Ah) of the fade law.
    #[arg(long, default_value_t = 2.0)]
    pub q_nom: f64,
    /// Per-epoch loss CSV.
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainUqArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// SOH model whose normalizer is shared; fitted on `--train` when omitted.
    #[arg(long)]
    pub soh_model: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Predictions CSV with `soh_true`.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Uncertainty CSV.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// With `--uq-model` and `--features`, runs the noise sweep.
    #[arg(long, requires_all = ["uq_model", "features"])]
    pub soh_model: Option<PathBuf>,
    #[arg(long)]
    pub uq_model: Option<PathBuf>,
    /// Labeled features for the noise sweep.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => commands::simulate(&a),
        Command::GenData(a) => commands::gen_data(&a),
        Command::Features(a) => commands::features(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::TrainSoh(a) => commands::train_soh(&a),
        Command::PredictSoh(a) => commands::predict_soh(&a),
        Command::TrainUq(a) => commands::train_uq(&a),
        Command::ScoreUq(a) => commands::score_uq(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.exit_code()
        }
    }
}
