use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use translucid::diffusion::ScheduleShape;
use translucid::inference::DiscSource;

mod commands;

/// Transparency-diffusion surface anomaly detection.
#[derive(Debug, Parser)]
#[command(name = "translucid", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a denoiser on the normal images of one category.
    Train(TrainArgs),
    /// Run the reverse process and write anomaly maps and scores.
    Infer(InferArgs),
    /// Compute AUROC and AUPRO from predicted maps and ground-truth masks.
    Eval(EvalArgs),
    /// Write synthetic training samples (image, mask, previous mask).
    SynthPreview(SynthArgs),
    /// Metric-vs-parameter table for lambda, kernel, steps or schedule.
    Sweep(SweepArgs),
    /// Check the forward/reverse algebra on random decompositions.
    VerifyProcess(VerifyArgs),
    /// Generate the procedural toy category on disk.
    MakeToy(ToyArgs),
}

#[derive(Debug, Clone, Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the 32x32 desk preset instead of the full-size defaults.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    category: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    schedule: Option<Schedule>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Schedule {
    Linear,
    Quadratic,
    Root,
}

impl From<Schedule> for ScheduleShape {
    fn from(s: Schedule) -> Self {
        match s {
            Schedule::Linear => ScheduleShape::Linear,
            Schedule::Quadratic => ScheduleShape::Quadratic,
            Schedule::Root => ScheduleShape::Root,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Disc {
    MeanSoft,
    MeanBinarized,
    LastOnly,
}

impl From<Disc> for DiscSource {
    fn from(d: Disc) -> Self {
        match d {
            Disc::MeanSoft => DiscSource::MeanSoft,
            Disc::MeanBinarized => DiscSource::MeanBinarized,
            Disc::LastOnly => DiscSource::LastOnly,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_drop_epoch: Option<usize>,
    /// Directory for checkpoints and the loss log.
    #[arg(long, default_value = "runs/train")]
    out_dir: PathBuf,
    /// Continue from a training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FusionArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    disc: Option<Disc>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    fusion: FusionArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input_dir: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write every intermediate image and mask.
    #[arg(long)]
    save_trace: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    pred_dir: PathBuf,
    /// Holds `<defect>/<stem>_mask.png`; predictions without a mask are normal.
    #[arg(long)]
    gt_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fpr_limit: Option<f64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SweepParamName {
    Lambda,
    Kernel,
    Steps,
    Schedule,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(flatten)]
    fusion: FusionArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    param: SweepParamName,
    /// Comma-separated values, e.g. `0,0.5,0.95,1`.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    cases: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
}

#[derive(Debug, Args)]
struct ToyArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long, default_value = "toy")]
    category: String,
    #[arg(long, default_value_t = 50)]
    train: usize,
    #[arg(long, default_value_t = 20)]
    test_normal: usize,
    #[arg(long, default_value_t = 20)]
    test_anomalous: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Eval(a) => commands::eval(a),
        Command::SynthPreview(a) => commands::synth_preview(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::VerifyProcess(a) => commands::verify_process(a),
        Command::MakeToy(a) => commands::make_toy(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
