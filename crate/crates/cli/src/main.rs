//! `mfccnoise`: perturb speech files, evaluate batches, emulate streaming
//! and benchmark the attack.
//!
//! Exit status is 0 on success, 2 for usage or validation errors (bad
//! flags, config or input files) and 3 when processing fails.

mod commands;
mod config;
mod dump;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mfccnoise::AttackMode;

#[derive(Debug, Parser)]
#[command(
    name = "mfccnoise",
    version,
    about = "Adversarial MFCC noise for speech privacy"
)]
pub struct Cli {
    /// TOML config with optional [mfcc], [attack], [mask], [profile] and [provider] tables.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice (baselines, synthetic bench audio).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Write intermediate stages as CSV matrices into this directory.
    #[arg(long, global = true, value_name = "PATH")]
    pub dump_dir: Option<PathBuf>,
    /// Progress messages on standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Add adversarial noise to one WAV file.
    Perturb(PerturbArgs),
    /// Run a manifest of clips and write per-clip and aggregate reports.
    Eval(EvalArgs),
    /// Perturb a file chunk by chunk under a latency budget.
    Stream(StreamArgs),
    /// Measure fixed and per-iteration cost on synthetic chunks.
    Bench(BenchArgs),
    /// Print MFCC features of a WAV file as CSV.
    Mfcc(MfccArgs),
}

/// Attack overrides shared by the commands that generate noise.
#[derive(Debug, Clone, Default, Args)]
pub struct AttackArgs {
    /// Number of gradient iterations.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Per-sample noise cap as a fraction of full scale.
    #[arg(long, value_name = "F")]
    pub t_adv: Option<f64>,
    /// Peak per-sample change per iteration.
    #[arg(long, value_name = "F")]
    pub step_size: Option<f64>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Skip psychoacoustic masking.
    #[arg(long)]
    pub no_mask: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    AwayFromClean,
    TowardTarget,
}

impl From<ModeArg> for AttackMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AwayFromClean => AttackMode::AwayFromClean,
            ModeArg::TowardTarget => AttackMode::TowardTarget,
        }
    }
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Environment noise recording mixed in before the attack.
    #[arg(long, value_name = "PATH")]
    pub env_wav: Option<PathBuf>,
    /// Per-iteration CSV (iteration, cost, distortion, elapsed_ms).
    #[arg(long, value_name = "PATH")]
    pub trace: Option<PathBuf>,
    /// Report JSON path; defaults to OUTPUT with a .json extension.
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProviderKind {
    Stub,
    External,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// CSV with columns clip_id, wav_path, reference_text.
    pub manifest: PathBuf,
    /// Directory for aggregate.csv, curves.csv, summary.json and reports/.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// Transcription provider; without one only signal metrics are reported.
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
    /// JSON object mapping clip id to transcript, for the stub provider.
    #[arg(long, value_name = "PATH")]
    pub stub_map: Option<PathBuf>,
    #[arg(long, value_name = "URL")]
    pub endpoint: Option<String>,
    /// Environment variable holding the bearer token.
    #[arg(long, value_name = "VAR")]
    pub token_env: Option<String>,
    #[arg(long, value_name = "MS")]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    #[command(flatten)]
    pub attack: AttackArgs,
    /// telephone (450 ms) or messaging (1000 ms).
    #[arg(long)]
    pub profile: Option<String>,
    /// Custom added-delay budget; overrides the profile's.
    #[arg(long, value_name = "MS")]
    pub budget_ms: Option<f64>,
    #[arg(long, value_name = "MS")]
    pub chunk_ms: Option<f64>,
    /// Charge synthetic costs instead of wall-clock time.
    #[arg(long)]
    pub simulate_clock: bool,
    /// Fixed per-chunk cost; default 302 simulated, calibrated otherwise.
    #[arg(long, value_name = "MS")]
    pub fixed_ms: Option<f64>,
    /// Per-iteration cost; default 42 simulated, calibrated otherwise.
    #[arg(long, value_name = "MS")]
    pub per_iter_ms: Option<f64>,
    /// Cap on iterations granted to a chunk.
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Chunks arrive in real time instead of back to back.
    #[arg(long)]
    pub live: bool,
    /// Decision log CSV; defaults to OUTPUT with a .csv extension.
    #[arg(long, value_name = "PATH")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Iteration counts to time, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [5usize, 10])]
    pub iterations: Vec<usize>,
    /// Timed repetitions per configuration (median is reported).
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 200.0)]
    pub chunk_ms: f64,
    #[arg(long)]
    pub no_mask: bool,
    /// Machine-readable output: header plus one row per configuration.
    #[arg(long)]
    pub csv: bool,
}

#[derive(Debug, Args)]
pub struct MfccArgs {
    pub input: PathBuf,
    /// Output CSV; standard output when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

/// Command failure, tagged with the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Processing(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Processing(_) => 3,
        }
    }
}

pub trait Stage<T> {
    /// Failure here is a usage or validation error.
    fn usage(self) -> Result<T, Failure>;
    /// Failure here is a processing error.
    fn processing(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn processing(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Processing(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Perturb(a) => commands::perturb(&cli, a),
        Command::Eval(a) => commands::eval(&cli, a),
        Command::Stream(a) => commands::stream(&cli, a),
        Command::Bench(a) => commands::bench(&cli, a),
        Command::Mfcc(a) => commands::mfcc(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Processing(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
