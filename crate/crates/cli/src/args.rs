use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "homesim", version, about = "Household task simulator, trajectory data engine and evaluation harness")]
pub struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// More logging on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate random scenes into a directory.
    GenScenes(GenScenes),
    /// Synthesize task instructions for every scene in a directory.
    GenTasks(GenTasks),
    /// Derive key actions and exploratory plans.
    Plan(PlanArgs),
    /// Annotate plans with thoughts and forge anomaly or correction variants.
    Forge(ForgeArgs),
    /// Keep only trajectories that the reward model accepts.
    Filter(FilterArgs),
    /// Run an agent over a task set and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Corpus statistics as JSON.
    Stats(StatsArgs),
    /// Step through a stored trajectory as text.
    Replay(ReplayArgs),
    /// Export trajectories as multi-turn dialogues with loss spans.
    Export(ExportArgs),
    /// Serve interactive episodes over TCP or standard streams.
    Serve(ServeArgs),
    /// Generate or verify a whole stage directory.
    Corpus(CorpusArgs),
}

#[derive(Debug, Args)]
pub struct Data {
    /// Task file (one instruction per line).
    #[arg(long, value_name = "FILE")]
    pub tasks: PathBuf,
    /// Scene directory.
    #[arg(long, value_name = "DIR")]
    pub scenes: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenScenes {
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    /// kitchen, living_room, bedroom or bathroom; cycles through all when absent.
    #[arg(long)]
    pub room: Option<String>,
    #[arg(long, default_value_t = 7)]
    pub receptacles: usize,
    #[arg(long, default_value_t = 9)]
    pub items: usize,
}

#[derive(Debug, Args)]
pub struct GenTasks {
    #[arg(long, value_name = "DIR")]
    pub scenes: PathBuf,
    /// Comma-separated `sub_task=count` pairs, e.g. `enc2enc=5,exposed_search=2`.
    #[arg(long)]
    pub mix: String,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[command(flatten)]
    pub data: Data,
    /// Decoy navigations per plan; the config's detour range when absent.
    #[arg(long)]
    pub n_detours: Option<usize>,
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    #[command(flatten)]
    pub data: Data,
    #[arg(long)]
    pub n_detours: Option<usize>,
    /// Anomalies injected per trajectory.
    #[arg(long, default_value_t = 0)]
    pub anomalies: usize,
    /// Replace each trajectory by a correction of an induced failure when possible.
    #[arg(long)]
    pub corrections: bool,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub data: Data,
    #[arg(long, value_name = "FILE")]
    pub trajectories: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Where to write the per-trajectory rejection reasons.
    #[arg(long, value_name = "FILE")]
    pub rejected: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: Data,
    /// oracle, random, noisy:P, external or replay:FILE.
    #[arg(long, default_value = "oracle")]
    pub agent: String,
    /// Episodes per task.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Metrics report (JSON).
    #[arg(long, value_name = "FILE")]
    pub report: PathBuf,
    /// Per-episode metrics table (CSV).
    #[arg(long, value_name = "FILE")]
    pub table: Option<PathBuf>,
    /// Sampled trajectories, ready for `filter`.
    #[arg(long, value_name = "FILE")]
    pub trajectories: Option<PathBuf>,
    /// Request/response log of the external agent.
    #[arg(long, value_name = "FILE")]
    pub transcripts: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[command(flatten)]
    pub data: Data,
    #[arg(long, value_name = "FILE")]
    pub trajectories: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub data: Data,
    #[arg(long, value_name = "FILE")]
    pub trajectories: PathBuf,
    /// Task id of the trajectory to show; the first one when absent.
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub data: Data,
    #[arg(long, value_name = "FILE")]
    pub trajectories: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub data: Data,
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:7878", conflicts_with = "stdio")]
    pub listen: String,
    /// Serve a single connection on stdin/stdout instead.
    #[arg(long)]
    pub stdio: bool,
    /// Seconds to wait for each decision.
    #[arg(long)]
    pub decision_timeout: Option<u64>,
    /// Write the aggregate report here when the stdio session closes.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// stage1_imitation, stage2_rejection, stage3_reflection or test_set (also 1, 2, 3, test).
    #[arg(long)]
    pub stage: String,
    /// Fraction of the stage's preset size.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Exact task count, overriding the scale.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Check an existing directory against its manifest instead of generating.
    #[arg(long)]
    pub verify: bool,
}
