//! Command-line front end: dataset generation, teacher/student training,
//! evaluation, the beta x tau sweep and the loss-mode ablation, all emitting
//! CSV artifacts plus a reproducing manifest per run.
//!
//! Exit codes: 0 success, 1 sweep completed with failed cells, 2 usage or
//! configuration error.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kdar::datagen::ShiftMode;
use kdar::train::LossMode;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossModeArg {
    #[value(name = "bce_only", alias = "bce-only")]
    BceOnly,
    #[value(name = "kd_only", alias = "kd-only")]
    KdOnly,
    #[value(name = "apt_only", alias = "apt-only")]
    AptOnly,
    Kdar,
}

impl From<LossModeArg> for LossMode {
    fn from(v: LossModeArg) -> Self {
        match v {
            LossModeArg::BceOnly => LossMode::BceOnly,
            LossModeArg::KdOnly => LossMode::KdOnly,
            LossModeArg::AptOnly => LossMode::AptOnly,
            LossModeArg::Kdar => LossMode::Kdar,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ShiftModeArg {
    Inverted,
    Uniform,
}

impl From<ShiftModeArg> for ShiftMode {
    fn from(v: ShiftModeArg) -> Self {
        match v {
            ShiftModeArg::Inverted => ShiftMode::Inverted,
            ShiftModeArg::Uniform => ShiftMode::Uniform,
        }
    }
}

fn default_out_dir() -> PathBuf {
    std::env::var_os("KDAR_OUT_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

/// Flags shared by every training-flavored command. A JSON config file can
/// supply any subset of the training configuration; flags override it.
#[derive(Debug, Args)]
pub struct TrainCommonArgs {
    /// JSON config file mirroring the training configuration fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Hard-label / teacher mixture weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the distillation term in the total loss.
    #[arg(long)]
    beta: Option<f64>,
    /// Output directory (overrides KDAR_OUT_DIR).
    #[arg(long, default_value_os_t = default_out_dir())]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON file mirroring the synthetic-spec fields; flags override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    n_qtypes: Option<usize>,
    #[arg(long)]
    n_answers_per_type: Option<usize>,
    /// Train-prior power-law exponent (>= 1).
    #[arg(long)]
    skew: Option<f64>,
    #[arg(long)]
    shift_mode: Option<ShiftModeArg>,
    #[arg(long)]
    d_v: Option<usize>,
    #[arg(long)]
    d_q: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    annotator_count_max: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_os_t = default_out_dir())]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainTeacherArgs {
    /// Directory holding train.jsonl, test_ood.jsonl, test_iid.jsonl.
    #[arg(long, value_name = "DIR")]
    data_dir: PathBuf,
    /// Inverse-frequency debiasing of the teacher loss.
    #[arg(long)]
    teacher_reweight: Option<bool>,
    #[command(flatten)]
    common: TrainCommonArgs,
}

#[derive(Debug, Args)]
pub struct TrainStudentArgs {
    #[arg(long, value_name = "DIR")]
    data_dir: PathBuf,
    /// Teacher checkpoint; required for every loss mode except bce-only.
    #[arg(long, value_name = "PATH")]
    teacher: Option<PathBuf>,
    #[arg(long)]
    loss_mode: Option<LossModeArg>,
    #[command(flatten)]
    common: TrainCommonArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Dataset split to evaluate (a JSONL file).
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Training split used to derive the per-qtype prior (head answers).
    #[arg(long, value_name = "PATH")]
    train_data: PathBuf,
    #[arg(long, default_value_os_t = default_out_dir())]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_name = "DIR")]
    data_dir: PathBuf,
    #[arg(long, value_name = "PATH")]
    teacher: PathBuf,
    /// Comma-separated beta grid.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 3.0, 5.0])]
    beta: Vec<f64>,
    /// Comma-separated tau grid.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.5, 5.0, 10.0])]
    tau: Vec<f64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
    seeds: Vec<u64>,
    /// Number of sweep cells to run concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// JSON config file mirroring the training configuration fields.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Hard-label / teacher mixture weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Output directory (overrides KDAR_OUT_DIR).
    #[arg(long, default_value_os_t = default_out_dir())]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated seed list; each seed gets its own teacher (and its
    /// own generated benchmark unless --data-dir pins the datasets).
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    /// Reuse fixed datasets instead of generating the default benchmark per seed.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
    #[command(flatten)]
    common: TrainCommonArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic biased benchmark (train/test_ood/test_iid).
    GenData(GenDataArgs),
    /// Train the debiased surrogate teacher with (reweighted) BCE.
    TrainTeacher(TrainTeacherArgs),
    /// Train a student against the selected objective.
    TrainStudent(TrainStudentArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Run the beta x tau x seed grid and emit a long-format CSV.
    Sweep(SweepArgs),
    /// Run the four loss-mode rows and emit a 4-row CSV.
    Ablate(AblateArgs),
}

/// Distillation-regularized training laboratory on a synthetic long-tailed,
/// prior-shifted benchmark.
#[derive(Debug, Parser)]
#[command(name = "kdar", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData(args) => commands::gen_data(&args).map(|()| 0),
        Command::TrainTeacher(args) => commands::train_teacher_cmd(&args).map(|()| 0),
        Command::TrainStudent(args) => commands::train_student_cmd(&args).map(|()| 0),
        Command::Eval(args) => commands::eval_cmd(&args).map(|()| 0),
        Command::Sweep(args) => {
            commands::sweep_cmd(&args).map(|failed| if failed { 1 } else { 0 })
        }
        Command::Ablate(args) => commands::ablate_cmd(&args).map(|()| 0),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
