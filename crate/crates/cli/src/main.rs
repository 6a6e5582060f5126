mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use leduc_lab::Error;

/// Leduc Hold'em equilibrium solving, opponent generation, transformer
/// training and paired evaluation.
#[derive(Debug, Parser)]
#[command(name = "leduc-lab", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the game with CFR and write the equilibrium and its value.
    Solve(SolveArgs),
    /// Print suite exploitabilities for candidate bias scales.
    Calibrate(CalibrateArgs),
    /// Write the evaluation suite or a training population.
    GenOpponents(GenOpponentsArgs),
    /// Imitation pretraining on equilibrium self-play.
    Pretrain(PretrainArgs),
    /// Two-phase training against a population; resumable.
    Train(TrainArgs),
    /// Paired-seed evaluation against an opponent suite.
    Eval(EvalArgs),
    /// Results table and learning-curve data files.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Plus,
    Vanilla,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, default_value_t = 10_000)]
    pub iterations: u64,
    /// Stop early once per-player exploitability is below this value.
    #[arg(long)]
    pub target: Option<f64>,
    #[arg(long, value_enum, default_value_t = Variant::Plus)]
    pub variant: Variant,
    #[arg(long, env = "LEDUC_LAB_DIR", default_value = "artifacts")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub gto: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 1.5, 2.0, 3.0, 4.0])]
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OpponentMode {
    Suite,
    Population,
}

#[derive(Debug, Args)]
pub struct GenOpponentsArgs {
    #[arg(long, value_enum)]
    pub mode: OpponentMode,
    #[arg(long)]
    pub gto: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Population mode: number of random archetypes drawn before thinning.
    #[arg(long, default_value_t = 500)]
    pub candidates: usize,
    #[arg(long, default_value_t = 50)]
    pub keep: usize,
    #[arg(long, default_value_t = leduc_lab::archetypes::DEFAULT_SCALE)]
    pub scale: f64,
    #[arg(long, default_value_t = leduc_lab::archetypes::DEFAULT_SIGMA)]
    pub sigma: f64,
    #[arg(long, env = "LEDUC_LAB_DIR", default_value = "artifacts")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossMode {
    Ce,
    Kl,
}

/// Model overrides shared by pretraining and training.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long, value_enum)]
    pub loss_mode: Option<LossMode>,
    #[arg(long)]
    pub label_smoothing: Option<f64>,
    /// Restrict the opponent-head softmax to legal actions.
    #[arg(long)]
    pub opp_loss_masked: bool,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub gto: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub hands_per_buffer: Option<u32>,
    #[arg(long)]
    pub eval_hands: Option<u32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "LEDUC_LAB_DIR", default_value = "artifacts")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub gto: PathBuf,
    /// Opponent manifest written by `gen-opponents --mode population`.
    #[arg(long)]
    pub population: PathBuf,
    /// Checkpoint written by `pretrain`.
    #[arg(long)]
    pub pretrained: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Continue from the training state in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Stop once Phase 1 ends.
    #[arg(long)]
    pub phase1_only: bool,
    /// Emit agent-turn tokens only.
    #[arg(long)]
    pub single_turn: bool,
    #[arg(long)]
    pub total_epochs: Option<u64>,
    #[arg(long)]
    pub hands_per_buffer: Option<u32>,
    #[arg(long)]
    pub phase1_alpha: Option<f64>,
    #[arg(long)]
    pub phase1_epsilon_greedy: Option<f64>,
    #[arg(long)]
    pub opp_ce_threshold: Option<f64>,
    #[arg(long)]
    pub consecutive_checks: Option<u32>,
    #[arg(long)]
    pub phase1_max_epochs: Option<u64>,
    #[arg(long)]
    pub check_interval: Option<u64>,
    #[arg(long)]
    pub validation_hands: Option<u32>,
    #[arg(long)]
    pub phase1_gto_fraction: Option<f64>,
    #[arg(long)]
    pub phase2_alpha: Option<f64>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    #[arg(long)]
    pub epsilon_max: Option<f64>,
    /// Use this mixing weight for every buffer instead of the schedule.
    #[arg(long)]
    pub fixed_lambda: Option<f64>,
    #[arg(long)]
    pub phase2_gto_fraction: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub accumulation_phase1: Option<u32>,
    #[arg(long)]
    pub accumulation_phase2: Option<u32>,
    /// Save and exit after this epoch; continue later with --resume.
    #[arg(long)]
    pub stop_after_epoch: Option<u64>,
    /// Save the training state every this many epochs.
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = "LEDUC_LAB_DIR", default_value = "artifacts")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Sample,
    Argmax,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gto: PathBuf,
    /// Opponent manifest, usually the evaluation suite.
    #[arg(long)]
    pub suite: PathBuf,
    /// Model checkpoint to evaluate.
    #[arg(
        long,
        conflicts_with = "agent_strategy",
        required_unless_present = "agent_strategy"
    )]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a strategy table instead of a model.
    #[arg(long)]
    pub agent_strategy: Option<PathBuf>,
    /// The model was trained on agent-turn tokens only.
    #[arg(long)]
    pub single_turn: bool,
    #[arg(long, default_value_t = 3000)]
    pub hands: u32,
    #[arg(long, default_value_t = 3)]
    pub trials: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Mode::Sample)]
    pub action_mode: Mode,
    #[arg(long, env = "LEDUC_LAB_DIR", default_value = "artifacts")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `results.csv` written by `eval`.
    #[arg(long)]
    pub results: PathBuf,
    /// `metrics.csv` written by `train`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, env = "LEDUC_LAB_DIR", default_value = "artifacts")]
    pub out: PathBuf,
}

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_MISSING: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::MissingArtifact(_) => EXIT_MISSING,
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Solve(a) => commands::solve(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::GenOpponents(a) => commands::gen_opponents(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Report(a) => commands::report(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
