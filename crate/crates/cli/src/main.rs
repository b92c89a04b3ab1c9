use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use narco::gradcheck::Suite;
use narco::instance::ProblemKind;
use narco::linsat::LinSatConfig;
use narco::problems::flp::Metric;
use narco::solver::{InitMode, SearchConfig};

mod commands;
mod report;

/// Latent-code gradient search for facility location, max coverage and TSP.
#[derive(Parser, Debug)]
#[command(name = "narco", version, about)]
struct Cli {
    /// Worker threads; 0 uses one per core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded random instance file.
    Gen(GenArgs),
    /// Run latent search on an instance.
    Solve(SolveArgs),
    /// Solve an instance exactly (small instances only).
    Oracle(BaselineArgs),
    /// Run the constructive baseline on an instance.
    Greedy(BaselineArgs),
    /// Run every solver on every instance file in a directory.
    Bench(BenchArgs),
    /// Run the finite-difference gradient suites.
    Gradcheck(GradcheckArgs),
    /// Reproduce the FLP ablation grids on the seeded testbed.
    Ablate(AblateArgs),
    /// Pretrain an encoder on generated instances.
    Pretrain(PretrainArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    problem: ProblemKind,
    /// Locations, sets or cities.
    #[arg(long)]
    m: usize,
    /// Selection budget (not used for tsp).
    #[arg(long)]
    k: Option<usize>,
    /// Items (mcp only).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "euclidean")]
    metric: Metric,
    /// Output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SearchArgs {
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Perturbed samples per step.
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Gumbel noise scale.
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    /// Projection temperature.
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    /// FLP softmin inverse temperature.
    #[arg(long, default_value_t = 50.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial latent code: zeros, random or encoder.
    #[arg(long, default_value = "zeros")]
    init: InitMode,
    /// Local improvement of the incumbent after every step (FLP).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    neighborhood: bool,
    /// Stop after the first step that ends past this budget.
    #[arg(long)]
    time_limit_ms: Option<u64>,
    /// Encoder parameters for `--init encoder`.
    #[arg(long)]
    encoder: Option<PathBuf>,
}

impl SearchArgs {
    fn config(&self) -> SearchConfig {
        SearchConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            sigma: self.sigma,
            beta: self.beta,
            seed: self.seed,
            neighborhood: self.neighborhood,
            init: self.init,
            linsat: LinSatConfig {
                tau: self.tau,
                ..LinSatConfig::default()
            },
            time_limit_ms: self.time_limit_ms,
        }
    }
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
    /// Reference objective for the gap column; left empty when omitted.
    #[arg(long)]
    best_known: Option<f64>,
    /// Result CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step trace CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Fill the trace's elapsed_ms column (makes the file run-dependent).
    #[arg(long)]
    trace_timing: bool,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    instance: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Directory of instance files (*.json).
    #[arg(long)]
    dir: PathBuf,
    /// Comma-separated solvers: latent, greedy, oracle.
    #[arg(long, value_delimiter = ',', default_value = "latent,greedy,oracle")]
    solvers: Vec<String>,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// One of all, diffcore, linsat, objectives, encoder.
    #[arg(long, default_value = "all")]
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl GradcheckArgs {
    fn suites(&self) -> anyhow::Result<Vec<Suite>> {
        if self.suite == "all" {
            return Ok(Suite::ALL.to_vec());
        }
        Ok(vec![self.suite.parse()?])
    }
}

#[derive(Args, Debug)]
struct AblateArgs {
    /// 1: softmin inverse-temperature sweep; 2: min vs softmin, with and
    /// without search.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    table: u8,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Seed of the first testbed instance; search seeds derive from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// flp or mcp.
    #[arg(long, default_value = "flp")]
    problem: ProblemKind,
    /// Number of generated training instances.
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 20)]
    m: usize,
    #[arg(long, default_value_t = 3)]
    k: usize,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 50.0)]
    beta: f64,
    /// Encoder parameter file to write.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match pool.install(|| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
