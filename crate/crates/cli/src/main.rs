//! `multigail`: record demonstrations, train, evaluate, plot and serve.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

mod commands;
mod manifest;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use multigail::envs::EnvId;

#[derive(Debug, Parser)]
#[command(
    name = "multigail",
    version,
    about = "Multi-persona adversarial imitation: demos, training, evaluation and live serving"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Record scripted-expert demonstrations, one file per persona.
    GenDemos(GenDemosArgs),
    /// Train one α-conditioned policy against one discriminator per persona.
    Train(TrainArgs),
    /// Run an evaluation suite on a checkpoint and write report tables.
    Eval(EvalArgs),
    /// Render the report tables in a directory to PNG images.
    ExportPlots(ExportPlotsArgs),
    /// Serve a checkpoint over WebSocket for live α steering.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EnvArg {
    Driving,
    Navigation,
}

impl From<EnvArg> for EnvId {
    fn from(e: EnvArg) -> Self {
        match e {
            EnvArg::Driving => EnvId::Driving,
            EnvArg::Navigation => EnvId::Navigation,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDemosArgs {
    /// Experiment config; supplies env, personas, sample count and seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Environment to record in (required without --config).
    #[arg(long, value_enum)]
    pub env: Option<EnvArg>,
    /// Comma-separated persona names; defaults to every persona of the env.
    #[arg(long, value_delimiter = ',')]
    pub personas: Vec<String>,
    /// State-action samples per persona [default: 5000].
    #[arg(long)]
    pub samples: Option<usize>,
    /// Recording seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Layout file replacing the env's reference layout.
    #[arg(long)]
    pub layout: Option<PathBuf>,
    /// Output directory; defaults to the config's demos.dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for checkpoints, metrics log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides train.seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train the single-persona baseline for this config persona instead
    /// (one discriminator, α fixed at 1).
    #[arg(long)]
    pub persona: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// KL, JS, χ² and W1 of each one-hot agent against each expert.
    Divergence,
    /// Pearson correlation of signature-action usage with each α component.
    Correlation,
    /// Signature-action usage under blended α versus Policy Fusion.
    FusionCompare,
    /// Kernel density grids of the 2-D continuous actions.
    Kde,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Divergence => "divergence",
            Suite::Correlation => "correlation",
            Suite::FusionCompare => "fusion-compare",
            Suite::Kde => "kde",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Which measurement to run.
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Output directory for the report tables.
    #[arg(long)]
    pub out: PathBuf,
    /// Episodes per α (per grid point for correlation) [default: 10, 4 for correlation, 30 for fusion-compare].
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Evaluation seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Extra α to evaluate (divergence, kde) or the only blend to compare (fusion-compare).
    #[arg(long, value_delimiter = ',', value_parser = parse_unit)]
    pub alpha: Vec<f64>,
    /// Directory of expert demonstrations (<persona>.jsonl); recorded afresh when absent.
    #[arg(long)]
    pub demos: Option<PathBuf>,
    /// Comma-separated single-persona checkpoints in persona order (fusion-compare).
    #[arg(long, value_delimiter = ',')]
    pub members: Vec<PathBuf>,
    /// Fails unless the checkpoint was trained on this env.
    #[arg(long, value_enum)]
    pub env: Option<EnvArg>,
    /// Layout file, for checkpoints trained off the reference layouts.
    #[arg(long)]
    pub layout: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportPlotsArgs {
    /// Directory written by `eval`.
    #[arg(long)]
    pub report: PathBuf,
    /// Image directory [default: <report>/plots].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Address to listen on; port 0 picks a free port.
    #[arg(long, default_value = "127.0.0.1:8765")]
    pub bind: String,
    /// Environment seed for sessions that do not pass one.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// α for sessions that do not pass one [default: all ones].
    #[arg(long, value_delimiter = ',', value_parser = parse_unit)]
    pub alpha: Vec<f64>,
    /// Environment steps per second.
    #[arg(long, default_value_t = 20.0)]
    pub tick_rate: f64,
    /// Seconds a disconnected session stays resumable.
    #[arg(long, default_value_t = 30)]
    pub session_timeout: u64,
    /// Act with the distribution mode instead of sampling.
    #[arg(long)]
    pub deterministic: bool,
    /// Fails unless the checkpoint was trained on this env.
    #[arg(long, value_enum)]
    pub env: Option<EnvArg>,
    /// Layout file, for checkpoints trained off the reference layouts.
    #[arg(long)]
    pub layout: Option<PathBuf>,
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn usage(msg: impl Into<String>) -> Self {
        Failure::Usage(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Failure::Runtime(msg.into())
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<multigail::Error> for Failure {
    fn from(e: multigail::Error) -> Self {
        use multigail::Error as E;
        match e {
            E::Usage(_) | E::Config(_) | E::Layout(_) | E::UnknownPersona { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<multigail_server::ServerError> for Failure {
    fn from(e: multigail_server::ServerError) -> Self {
        use multigail_server::ServerError as E;
        match e {
            E::Core(c) => c.into(),
            E::Model(m) => Failure::Usage(m),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenDemos(a) => commands::gen_demos(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExportPlots(a) => commands::export_plots(a),
        Command::Serve(a) => commands::serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
