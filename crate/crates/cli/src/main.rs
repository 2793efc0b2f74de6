//! `platoon`: validate networks, solve static games, run closed-loop
//! Monte Carlo experiments and parameter sweeps.
//!
//! Exit codes: 0 success, 1 domain or configuration error, 2 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use platoon_core::experiment::{run_experiment, sweep, write_outputs, write_sweep, ExperimentConfig, RunOptions, SweepAxis};
use platoon_core::game::{ActionProfile, Fleet, Payoffs, Scenario};
use platoon_core::network::RoadNetwork;
use platoon_core::oracle::PlatoonGame;
use platoon_core::sim::PolicyKind;
use platoon_core::solver::{nash_seek, ActionSpace, SolveOptions, UtilityOracle};
use platoon_core::stochastic::{enumerate_support, sample_support, ScenarioDistribution, DEFAULT_SUPPORT_CAP};

#[derive(Parser)]
#[command(name = "platoon", version, about = "Hub-based platoon coordination engine and simulator")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a network file and print every violation.
    Validate {
        /// Network JSON file.
        network: PathBuf,
    },
    /// Solve the open-loop game for a fleet and write the equilibrium.
    SolveStatic(SolveArgs),
    /// Run a Monte Carlo experiment and write metrics and tables.
    Simulate(SimulateArgs),
    /// Repeat an experiment over the values of one parameter.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct SolveArgs {
    /// Network JSON file.
    #[arg(long)]
    network: PathBuf,
    /// Fleet JSON file: [{id, edge_sequence, start_step, waiting_budget_steps}].
    #[arg(long)]
    fleet: PathBuf,
    /// Scenario JSON file; solves the deterministic game.
    #[arg(long, conflicts_with = "distribution")]
    scenario: Option<PathBuf>,
    /// Distribution JSON file; solves the expected-utility game.
    #[arg(long)]
    distribution: Option<PathBuf>,
    /// Sample this many scenarios when the support exceeds the cap.
    #[arg(long)]
    sample: Option<usize>,
    /// Largest support enumerated exactly.
    #[arg(long, default_value_t = DEFAULT_SUPPORT_CAP)]
    support_cap: usize,
    /// Seed for sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Platooning benefit c_b in SEK per km.
    #[arg(long, default_value_t = 1.70)]
    c_b: f64,
    /// Waiting cost c_t in SEK per time step.
    #[arg(long, default_value_t = 22.0)]
    c_t: f64,
    /// Check exhaustively that the result is a Nash equilibrium.
    #[arg(long)]
    verify: bool,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Overrides {
    /// Number of vehicles.
    #[arg(long = "vehicles")]
    vehicles: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated policies among SP, IP, KTT, DRHS, SRHS.
    #[arg(long, value_delimiter = ',')]
    policies: Option<Vec<String>>,
    /// Waiting budget in time steps.
    #[arg(long)]
    budget: Option<u32>,
    /// Platooning benefit c_b in SEK per km.
    #[arg(long)]
    c_b: Option<f64>,
    /// Waiting cost c_t in SEK per time step.
    #[arg(long)]
    c_t: Option<f64>,
    /// Receding-horizon length H in nodes.
    #[arg(long)]
    horizon: Option<usize>,
    /// Re-decision gating window in minutes.
    #[arg(long)]
    gating: Option<u32>,
    /// Monte Carlo samples.
    #[arg(long)]
    samples: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Also write one JSON-lines trace per sample and policy under traces/.
    #[arg(long)]
    traces: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SweepArgs {
    /// Experiment config JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Swept parameter: vehicle_count, budget or c_b.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values (c_b in SEK per km).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<String>,
    /// Comma-separated c_b values in SEK per km crossed with the axis.
    #[arg(long, value_delimiter = ',')]
    c_b_values: Option<Vec<f64>>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Marks failures that map to exit code 2.
#[derive(Debug)]
struct IoFailure;

impl std::fmt::Display for IoFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("I/O error")
    }
}

impl std::error::Error for IoFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    let io = err.chain().any(|c| {
        c.is::<IoFailure>()
            || c.is::<std::io::Error>()
            || c.downcast_ref::<platoon_core::Error>().is_some_and(platoon_core::Error::is_io)
    });
    if io {
        2
    } else {
        1
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| anyhow::Error::new(e).context(IoFailure).context(format!("cannot read {}", path.display())))
}

fn centi(sek: f64) -> Result<i64> {
    if !sek.is_finite() || sek < 0.0 {
        bail!("monetary values must be finite and nonnegative, got {sek}");
    }
    Ok((sek * 100.0).round() as i64)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Validate { network } => cmd_validate(&network),
        Command::SolveStatic(args) => cmd_solve_static(&args),
        Command::Simulate(args) => cmd_simulate(&args),
        Command::Sweep(args) => cmd_sweep(&args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn cmd_validate(path: &Path) -> Result<u8> {
    let network = RoadNetwork::from_json_str(&read(path)?).with_context(|| format!("cannot parse {}", path.display()))?;
    let violations = network.validate();
    if violations.is_empty() {
        println!("{}: ok ({} hubs, {} edges)", path.display(), network.hubs().len(), network.edges().len());
        return Ok(0);
    }
    for v in &violations {
        println!("{v}");
    }
    println!("{}: {} violation(s)", path.display(), violations.len());
    Ok(1)
}

fn cmd_solve_static(args: &SolveArgs) -> Result<u8> {
    let network = RoadNetwork::from_json_str(&read(&args.network)?).context("network")?;
    network.ensure_valid()?;
    let entries: Vec<platoon_core::game::FleetEntry> = serde_json::from_str(&read(&args.fleet)?).context("fleet")?;
    let fleet = Fleet::from_entries(&network, &entries)?;
    let payoffs = Payoffs::new(centi(args.c_b)?, centi(args.c_t)?);

    let (game, approximate) = match (&args.scenario, &args.distribution) {
        (Some(path), _) => {
            let scenario: Scenario = serde_json::from_str(&read(path)?).context("scenario")?;
            (PlatoonGame::deterministic(&network, &fleet, &scenario, &payoffs)?, false)
        }
        (None, Some(path)) => {
            let dist = ScenarioDistribution::from_json_str(&read(path)?).context("distribution")?.completed(&network);
            dist.validate_against(&network, Some(&fleet))?;
            let support = match (enumerate_support(&dist, args.support_cap), args.sample) {
                (Ok(s), _) => s,
                (Err(platoon_core::Error::SupportTooLarge { .. }), Some(n)) => sample_support(&dist, n, args.seed)?,
                (Err(e), _) => return Err(e.into()),
            };
            let approximate = support.is_approximate();
            (PlatoonGame::stochastic(&network, &fleet, &support, &payoffs)?, approximate)
        }
        (None, None) => (PlatoonGame::deterministic(&network, &fleet, &Scenario::default(), &payoffs)?, false),
    };

    let spaces: Vec<ActionSpace> = fleet.vehicles().iter().map(ActionSpace::for_vehicle).collect();
    let options = SolveOptions { verify: args.verify, ..SolveOptions::default() };
    let report = nash_seek(&game, ActionProfile::zeros(&fleet), &spaces, &options)?;
    let utilities: serde_json::Map<String, serde_json::Value> = fleet
        .vehicles()
        .iter()
        .enumerate()
        .map(|(i, v)| Ok((v.id.to_string(), serde_json::Value::String(game.expectation(game.utility(i, &report.profile)?).to_string()))))
        .collect::<Result<_>>()?;
    let mut out = serde_json::to_value(report.to_file(&fleet))?;
    out["expected_utility_centi"] = serde_json::Value::Object(utilities);
    out["approximate"] = serde_json::Value::Bool(approximate);
    let text = serde_json::to_string_pretty(&out)? + "\n";
    match &args.out {
        Some(path) => std::fs::write(path, text).map_err(|e| anyhow::Error::new(e).context(IoFailure))?,
        None => print!("{text}"),
    }
    if args.verify && !report.verified {
        bail!("the result failed the exhaustive equilibrium check");
    }
    Ok(0)
}

fn load_config(path: &Path, o: &Overrides) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?;
    if let Some(n) = o.vehicles {
        config.vehicle_count = n;
    }
    if let Some(s) = o.seed {
        config.seed = s;
    }
    if let Some(p) = &o.policies {
        config.policies = p.iter().map(|s| s.parse::<PolicyKind>()).collect::<Result<_, _>>()?;
    }
    if let Some(b) = o.budget {
        config.waiting_budget_steps = b;
    }
    if let Some(c) = o.c_b {
        config.c_b_centi = centi(c)?;
    }
    if let Some(c) = o.c_t {
        config.c_t_centi = centi(c)?;
    }
    if let Some(h) = o.horizon {
        config.horizon = h;
    }
    if let Some(g) = o.gating {
        config.gating_minutes = g;
    }
    if let Some(s) = o.samples {
        config.samples = s;
    }
    config.validate()?;
    if let Some(j) = o.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global().context("cannot size the worker pool")?;
    }
    Ok(config)
}

fn load_network(config: &ExperimentConfig) -> Result<RoadNetwork> {
    let network = RoadNetwork::from_json_str(&read(&config.network)?).with_context(|| format!("network {}", config.network.display()))?;
    network.ensure_valid()?;
    Ok(platoon_core::experiment::network_with_profiles(network, config))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| anyhow::Error::new(e).context(IoFailure).context(format!("cannot create {}", dir.display())))
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8> {
    let config = load_config(&args.config, &args.overrides)?;
    let network = load_network(&config)?;
    create_dir(&args.out)?;
    log::info!("{} samples of {} vehicles on {}", config.samples, config.vehicle_count, config.network.display());
    let result = run_experiment(&config, &network, RunOptions { keep_traces: args.traces })?;
    write_outputs(&args.out, &result)?;
    for p in &result.report.policies {
        println!(
            "{:<5} rate {:.4} ± {:.4}  wait {:.2} min  utility {:.4} MSEK  ({} samples, {} failed)",
            p.policy.to_string(),
            p.platooning_rate.mean,
            p.platooning_rate.std_error,
            p.avg_wait_minutes.mean,
            p.total_utility_million_sek,
            p.samples,
            p.failures
        );
    }
    Ok(0)
}

fn cmd_sweep(args: &SweepArgs) -> Result<u8> {
    let axis: SweepAxis = args.axis.parse()?;
    if args.values.is_empty() {
        bail!("--values must list at least one value");
    }
    let values = args
        .values
        .iter()
        .map(|v| match axis {
            SweepAxis::CB => centi(v.trim().parse::<f64>().with_context(|| format!("bad c_b value {v:?}"))?),
            _ => v.trim().parse::<i64>().with_context(|| format!("bad {axis} value {v:?}")),
        })
        .collect::<Result<Vec<i64>>>()?;
    let c_b_values = args.c_b_values.iter().flatten().map(|&c| centi(c)).collect::<Result<Vec<i64>>>()?;
    let config = load_config(&args.config, &args.overrides)?;
    let network = load_network(&config)?;
    create_dir(&args.out)?;
    log::info!("sweeping {axis} over {values:?}");
    let table = sweep(&config, &network, axis, &values, &c_b_values)?;
    write_sweep(&args.out, &table)?;
    println!("{} cells written to {}", table.cells.len(), args.out.display());
    Ok(0)
}
