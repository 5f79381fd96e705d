//! `mdp-stability`: bisimulation distances, shutdown-time certificates and
//! on-policy perturbation experiments for finite MDPs.
//!
//! Exit codes: 0 success, 1 negative verdict, 2 input error, 3 solver did
//! not converge.

mod commands;
mod report;

use std::path::PathBuf;
use std::time::{Instant, SystemTime};

use clap::{Args, Parser, Subcommand};

use report::{emit, Format, RunMeta};

#[derive(Parser)]
#[command(name = "mdp-stability", version, about = "Stability analyses for finite MDPs with a shutdown set")]
struct Cli {
    /// Write the result here instead of stdout (also writes `<out>.meta.json`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct MetricArgs {
    /// Reward-gap coefficient (default `1 - gamma`).
    #[arg(long = "c-r")]
    pub c_r: Option<f64>,
    /// Transport coefficient (default `gamma`).
    #[arg(long = "c-t")]
    pub c_t: Option<f64>,
    /// Target sup-norm error of the metric.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 100_000)]
    pub max_iterations: usize,
}

#[derive(Args, Clone)]
pub struct SafetyArgs {
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// `worst`, `uniform` (over non-safe states) or a state id.
    #[arg(long, default_value = "worst")]
    pub start: String,
    #[arg(long, default_value_t = 1e-10)]
    pub value_tol: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Check an MDP document; exit 1 with the violation list if invalid.
    Validate { path: PathBuf },
    /// Cross-MDP bisimulation metric and its Hausdorff distance.
    Bisim {
        path1: PathBuf,
        path2: PathBuf,
        #[command(flatten)]
        metric: MetricArgs,
    },
    /// Grid search for the reward scaling that best aligns two MDPs.
    Align {
        path1: PathBuf,
        path2: PathBuf,
        #[arg(long, default_value_t = 101)]
        grid: usize,
        #[command(flatten)]
        metric: MetricArgs,
    },
    /// Quotient by bisimilarity.
    Quotient {
        path: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        merge_tol: f64,
        #[command(flatten)]
        metric: MetricArgs,
    },
    /// Worst expected shutdown time over epsilon-optimal policies.
    Certify {
        path: PathBuf,
        #[command(flatten)]
        safety: SafetyArgs,
        /// Horizon `N`; exit 1 when the MDP is not `(N, eps)`-safe.
        #[arg(long = "big-n")]
        big_n: Option<f64>,
        /// Also sample this many stochastic mixtures of epsilon-optimal policies.
        #[arg(long, default_value_t = 0)]
        probe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Worst-case shutdown time as a function of epsilon.
    Frontier {
        path: PathBuf,
        #[arg(long = "epsilon", value_delimiter = ',', default_value = "0.001,0.01,0.03,0.1,0.3,1,3")]
        epsilons: Vec<f64>,
        #[arg(long, default_value_t = 1e-10)]
        value_tol: f64,
    },
    /// Expected steps to the safe set under one deterministic policy.
    HittingTime {
        path: PathBuf,
        /// Comma-separated action ids, one per state, or `greedy`.
        #[arg(long, default_value = "greedy")]
        policy: String,
        #[arg(long, default_value = "uniform")]
        start: String,
    },
    /// Build the playing-dead variant of a base MDP (default: built-in three-state base).
    PlayingDead {
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        escape_state: Option<String>,
        #[arg(long)]
        escape_action: Option<String>,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        /// Also write the base MDP document here.
        #[arg(long)]
        write_base: Option<PathBuf>,
    },
    /// Give every non-safe transition a `1/N` chance of shutting down.
    UniformShutdown {
        path: PathBuf,
        #[arg(long = "big-n")]
        big_n: f64,
    },
    /// Split a state into exact bisimilar copies.
    Duplicate {
        path: PathBuf,
        #[arg(long)]
        state: String,
        #[arg(long, default_value_t = 2)]
        copies: usize,
    },
    /// Seeded random embedded MDP.
    Random {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        states: usize,
        #[arg(long, default_value_t = 2)]
        actions: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, default_value_t = 0.5)]
        sparsity: f64,
        #[arg(long, default_value_t = 0.9)]
        gamma: f64,
    },
    /// Shutdown probability, transient set, spectral radius and `B(M)` of a fixed policy.
    Onpolicy {
        path: PathBuf,
        /// Policy file `{"weights": [[..]], "temperature": t}` (default: uniform).
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, default_value = "uniform")]
        start: String,
    },
    /// Rate-of-decrease checks over random perturbations of several sizes.
    OnpolicySweep {
        path: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1e-2,1e-3,1e-4,1e-5,1e-6")]
        sizes: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        /// Append a uniform-shutdown row with this `N`.
        #[arg(long = "big-n")]
        big_n: Option<f64>,
        #[arg(long, default_value = "uniform")]
        start: String,
    },
    /// Stability checks over a ladder of reward-jittered copies of an MDP.
    StabilityExperiment {
        path: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        /// Horizon `N` (default: the certified worst time of the input).
        #[arg(long = "big-n")]
        big_n: Option<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1e-4,1e-3,1e-2,1e-1")]
        sizes: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra rung: compare against this MDP as well.
        #[arg(long)]
        perturbed: Option<PathBuf>,
        #[command(flatten)]
        metric: MetricArgs,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Bisim { .. } => "bisim",
            Command::Align { .. } => "align",
            Command::Quotient { .. } => "quotient",
            Command::Certify { .. } => "certify",
            Command::Frontier { .. } => "frontier",
            Command::HittingTime { .. } => "hitting-time",
            Command::PlayingDead { .. } => "playing-dead",
            Command::UniformShutdown { .. } => "uniform-shutdown",
            Command::Duplicate { .. } => "duplicate",
            Command::Random { .. } => "random",
            Command::Onpolicy { .. } => "onpolicy",
            Command::OnpolicySweep { .. } => "onpolicy-sweep",
            Command::StabilityExperiment { .. } => "stability-experiment",
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            Command::Certify { seed, .. }
            | Command::Random { seed, .. }
            | Command::OnpolicySweep { seed, .. }
            | Command::StabilityExperiment { seed, .. } => Some(*seed),
            _ => None,
        }
    }
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(raw) = std::env::var("MDP_STABILITY_THREADS") {
        let n: usize = raw
            .trim()
            .parse()
            .map_err(|_| anyhow::anyhow!("MDP_STABILITY_THREADS must be a positive integer, got {raw:?}"))?;
        if n == 0 {
            anyhow::bail!("MDP_STABILITY_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> i32 {
    use mdp_stability::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::NotConverged { .. } | Error::NumericalSolve { .. }) => 3,
        _ => 2,
    }
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return 2;
    }
    let started = SystemTime::now();
    let clock = Instant::now();
    let report = match commands::execute(&cli.command) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return exit_code(&e);
        }
    };
    let meta = RunMeta {
        command: cli.command.name(),
        seed: cli.command.seed(),
        started,
        elapsed: clock.elapsed(),
    };
    if let Err(e) = emit(&report, cli.format, cli.out.as_deref(), meta) {
        eprintln!("error: {e:#}");
        return 2;
    }
    report.status.code()
}

fn main() {
    std::process::exit(run());
}
