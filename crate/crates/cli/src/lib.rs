//! `moesched` command-line front end.
//!
//! Every command produces a human-readable summary for stdout and a JSON
//! report envelope embedding a [`RunManifest`]; `report --verify` re-runs a
//! manifest and checks the result is reproduced byte for byte.

mod commands;
pub mod error;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use error::{exit, CliError, CliResult};
pub use report::{Report, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "moesched", version, about = "Plan, simulate and analyse CPU-GPU MoE inference")]
pub struct Cli {
    /// Seed for every random choice of the command
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search for the fastest feasible prefill and decode strategies
    Plan(PlanArgs),
    /// Expert and non-expert latency across micro-batch sizes (CSV)
    Sweep(SweepArgs),
    /// Generate a synthetic routing trace
    Tracegen(TracegenArgs),
    /// Cluster a trace, probe prototypes and choose resident experts
    Stratify(StratifyArgs),
    /// Hit ratio of stratified vs random residency across capacities (CSV)
    Hitratio(HitratioArgs),
    /// Replay one layer of a plan on the overlap simulator
    Simulate(SimulateArgs),
    /// Summarize a report, or re-run its manifest with --verify
    Report(ReportArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Plan(_) => "plan",
            Command::Sweep(_) => "sweep",
            Command::Tracegen(_) => "tracegen",
            Command::Stratify(_) => "stratify",
            Command::Hitratio(_) => "hitratio",
            Command::Simulate(_) => "simulate",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// System file: [gpu], [cpu] and [link] tables
    #[arg(long)]
    pub system: PathBuf,
    /// Model file
    #[arg(long)]
    pub model: PathBuf,
    /// Batch file
    #[arg(long)]
    pub batch: PathBuf,
    /// Override a config value, e.g. system.gpu.vram_bytes=24e9
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Migration {
    PerPass,
    ReuseAcrossDecode,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    /// Micro-batch candidates (default: powers of two up to B, plus B)
    #[arg(long, value_delimiter = ',')]
    pub m: Vec<usize>,
    /// Pin an op's device, e.g. x1=gpu (x0 QKV, x1 attention, x2 output projection)
    #[arg(long = "force", value_name = "XI=DEVICE")]
    pub force: Vec<String>,
    #[arg(long)]
    pub forbid_cpu_attention: bool,
    /// Fraction of VRAM kept free on top of the budget
    #[arg(long, default_value_t = 0.0)]
    pub vram_slack: f64,
    /// Fix the number of resident experts per layer
    #[arg(long)]
    pub resident: Option<usize>,
    #[arg(long, value_enum, default_value_t = Migration::PerPass)]
    pub migration: Migration,
    /// Fraction of VRAM reserved as kernel workspace
    #[arg(long, default_value_t = 0.05)]
    pub workspace_fraction: f64,
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub search: SearchArgs,
    /// Routing trace; expert costs follow its stratified activation map
    #[arg(long, conflicts_with = "map")]
    pub trace: Option<PathBuf>,
    /// Activation map (JSON) weighting expert costs
    #[arg(long)]
    pub map: Option<PathBuf>,
    #[command(flatten)]
    pub strat: StratArgs,
    /// Write the JSON report here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Coalesced,
    Microbatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RestArg {
    Cpu,
    Migrate,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum, default_value_t = ModeArg::Coalesced)]
    pub mode: ModeArg,
    /// Devices of QKV, attention and output projection, e.g. GCG
    #[arg(long, default_value = "GGG")]
    pub placement: String,
    /// Resident experts per layer (default: all)
    #[arg(long)]
    pub resident: Option<usize>,
    /// Where non-resident activated experts run
    #[arg(long, value_enum, default_value_t = RestArg::Cpu)]
    pub rest: RestArg,
    #[arg(long, value_enum, default_value_t = PhaseArg::Prefill)]
    pub phase: PhaseArg,
    #[arg(long, value_delimiter = ',')]
    pub m: Vec<usize>,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the JSON report here
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TracegenArgs {
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub experts: usize,
    #[arg(long, default_value_t = 8)]
    pub top_k: usize,
    #[arg(long, default_value_t = 8)]
    pub topics: usize,
    #[arg(long, default_value_t = 1.2)]
    pub zipf: f64,
    /// Routed tokens per sample
    #[arg(long, default_value_t = 4)]
    pub tokens: usize,
    /// Distance between topic centres in embedding space
    #[arg(long, default_value_t = 4.0)]
    pub topic_spread: f64,
    /// How far a topic's expert ranking strays from the shared one
    #[arg(long, default_value_t = 4.0)]
    pub rank_jitter: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StratArgs {
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    /// Fraction of samples probed
    #[arg(long, default_value_t = 0.05)]
    pub ratio: f64,
    #[arg(long, default_value_t = 50)]
    pub max_iters: usize,
}

#[derive(Debug, Clone, Args)]
pub struct StratifyArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub strat: StratArgs,
    /// Resident experts per layer (default: a quarter of the experts)
    #[arg(long)]
    pub capacity: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct HitratioArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[command(flatten)]
    pub strat: StratArgs,
    /// Capacities to evaluate (default: 0, 25, 50, 75 and 100% of experts)
    #[arg(long, value_delimiter = ',')]
    pub capacities: Vec<usize>,
    /// Random residency plans averaged per capacity
    #[arg(long, default_value_t = 50)]
    pub baseline_seeds: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Report written by `plan --out`
    #[arg(long, conflicts_with_all = ["system", "model", "batch"])]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub system: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub batch: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_enum, default_value_t = PhaseArg::Prefill)]
    pub phase: PhaseArg,
    /// Decode step to replay (1-based)
    #[arg(long, default_value_t = 1)]
    pub step: usize,
    /// Also replay every layer of every step and compare the totals
    #[arg(long)]
    pub all_steps: bool,
    /// Write the timeline as trace events here
    #[arg(long)]
    pub timeline: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    pub file: PathBuf,
    /// Re-run the manifest and compare results
    #[arg(long)]
    pub verify: bool,
}

/// What a command produced. Nothing is written until [`Output::commit`].
#[derive(Debug, Default)]
pub struct Output {
    pub human: String,
    pub report: Option<Report>,
    pub files: Vec<(PathBuf, Vec<u8>)>,
}

impl Output {
    pub fn commit(&self) -> CliResult<()> {
        for (path, bytes) in &self.files {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))?;
        }
        Ok(())
    }
}

/// Parses `argv` (program name first) and runs the command without
/// touching the filesystem beyond reading inputs.
pub fn run<I, T>(argv: I) -> CliResult<Output>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| {
        let code = if e.use_stderr() { exit::USAGE } else { 0 };
        CliError::new(code, e.to_string())
    })?;
    let args: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    commands::execute(&cli, args)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let result = run(argv).and_then(|out| {
        out.commit()?;
        Ok(out)
    });
    match result {
        Ok(out) => {
            let _ = stdout.write_all(out.human.as_bytes());
            0
        }
        Err(e) if e.code == 0 => {
            let _ = stdout.write_all(e.message.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message.trim_end());
            e.code
        }
    }
}
