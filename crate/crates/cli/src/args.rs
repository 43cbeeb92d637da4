use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "qre", version, about = "Logit QRE solvers, diagnostics and experiments for Markov games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one game or scenario and write trace, policy and diagnostics.
    Solve(SolveArgs),
    /// Solve a traffic scenario over a λ grid and write the controllability table.
    Sweep(SweepArgs),
    /// Fit λ to behavior data by maximum likelihood.
    Calibrate(CalibrateArgs),
    /// Generate behavior data from the QRE at a given λ.
    Synth(SynthArgs),
    /// Recompute metrics on stored artifacts.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// Fit continuous-action policies on a benchmark and compare them with the Gibbs density.
    Continuous(ContinuousArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Root seed; every component derives its own stream from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving the CSV outputs and the manifest.
    #[arg(long, env = "QRE_OUT_DIR", default_value = "qre-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GameSource {
    /// Built-in game name or path to a game TOML file.
    #[arg(long, conflicts_with = "scenario")]
    pub game: Option<String>,
    /// `merge`, `intersection` or path to a scenario TOML file.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Standard deviation of reward perturbations injected into the game.
    #[arg(long)]
    pub sigma_perturb: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Two-timescale solver with exact critic sweeps.
    Exact,
    /// Two-timescale solver with a retrace critic on sampled trajectories.
    Sampled,
    /// Euler integration of the replicator-mutator ODE.
    Ode,
    /// Damped logit best-response fixed point.
    Oracle,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolveArgs {
    #[command(flatten)]
    pub source: GameSource,
    /// λ for every agent, or one comma-separated value per agent.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = Mode::Exact)]
    pub mode: Mode,
    #[arg(long, default_value_t = 5000)]
    pub iters: usize,
    /// Grow λ adaptively from `--lambda` up to this value.
    #[arg(long)]
    pub lambda_max: Option<f64>,
    /// QRE-gap tolerance for convergence and adaptive λ growth.
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Lower λ when the QRE-gap stalls.
    #[arg(long)]
    pub mitigate: bool,
    /// Retrace trace parameter for sampled mode.
    #[arg(long, default_value_t = 0.9)]
    pub retrace_lambda: f64,
    /// Trajectories per critic update in sampled mode.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    /// Integration step in ode mode.
    #[arg(long, default_value_t = 0.05)]
    pub dt: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_pi: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c_q: f64,
    /// Write every n-th iteration to the trace.
    #[arg(long, default_value_t = 1)]
    pub trace_every: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    Exact,
    Oracle,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    /// `merge`, `intersection` or path to a scenario TOML file.
    #[arg(long)]
    pub scenario: String,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,15,20")]
    pub lambda_grid: Vec<f64>,
    #[arg(long, value_enum, default_value_t = SweepMode::Exact)]
    pub mode: SweepMode,
    #[arg(long, default_value_t = 20_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 20_000)]
    pub episodes: usize,
    #[arg(long, default_value_t = 30)]
    pub horizon: usize,
    #[arg(long)]
    pub sigma_perturb: Option<f64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalibrateArgs {
    /// Built-in game name or path to a game TOML file.
    #[arg(long)]
    pub game: String,
    /// Behavior CSV with columns state_id, agent_id, action_id.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,8,10,15,20")]
    pub lambda_grid: Vec<f64>,
    /// Bootstrap resamples for the spread of λ*.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub game: String,
    #[arg(long)]
    pub lambda: f64,
    /// Time steps of play; each step yields one record per agent.
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub episode_len: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Subcommand)]
pub enum MetricsCommand {
    /// Diagnostics of a stored policy.
    Evaluate(EvaluateArgs),
    /// Summary table over stored traces.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Quick,
    Cem,
    Extended,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub game: String,
    /// Policy CSV as written by `solve`.
    #[arg(long)]
    pub policy: PathBuf,
    /// Override the λ stored with the policy.
    #[arg(long, value_delimiter = ',')]
    pub lambda: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = Tier::Quick)]
    pub tier: Tier,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SummarizeArgs {
    /// Trace CSV files.
    #[arg(long, num_args = 1.., required = true)]
    pub trace: Vec<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Quadratic,
    Bimodal,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ContinuousArgs {
    #[arg(long, value_enum, default_value_t = Benchmark::Quadratic)]
    pub benchmark: Benchmark,
    #[arg(long, default_value_t = 5.0)]
    pub lambda: f64,
    /// Mixture components.
    #[arg(long, default_value_t = 10)]
    pub mixture_m: usize,
    /// Mixture update iterations.
    #[arg(long, default_value_t = 2000)]
    pub iters: usize,
    #[arg(long, default_value_t = 200)]
    pub particles: usize,
    /// Quadrature points per dimension.
    #[arg(long, default_value_t = 400)]
    pub grid: usize,
    #[command(flatten)]
    pub common: Common,
}
