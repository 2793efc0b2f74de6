//! Monte Carlo experiments: synthetic fleets and delay profiles, metrics,
//! and parameter sweeps.
//!
//! Every random quantity is drawn from a stream derived from the master
//! seed and the sample index only, so policies within a sample, and sweep
//! cells across axis values, see the same fleets and ground truths.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Fleet, Payoffs, VehicleSpec};
use crate::network::{distances_from, shortest_path, DelayProfile, HubId, RoadNetwork, Step};
use crate::sim::{mix_seed, run_closed_loop, Policy, PolicyConfig, PolicyKind, SimulationTrace};
use crate::stochastic::ScenarioDistribution;

/// Synthetic day profiles: zero delay off-peak and a flat peak over
/// `[peak_start_step, peak_end_step)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DelayGenerator {
    /// Profiles per edge.
    pub profiles: usize,
    pub peak_start_step: Step,
    pub peak_end_step: Step,
    /// Peak heights are drawn uniformly per (profile, edge) from this range.
    pub min_peak_delay_steps: Step,
    pub max_peak_delay_steps: Step,
    /// Fixed height per profile on every edge; overrides the draws.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heights: Option<Vec<Step>>,
}

impl Default for DelayGenerator {
    fn default() -> Self {
        Self {
            profiles: 10,
            peak_start_step: 84,
            peak_end_step: 108,
            min_peak_delay_steps: 0,
            max_peak_delay_steps: 9,
            heights: None,
        }
    }
}

/// Solver and simulation knobs that rarely change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationKnobs {
    pub support_cap: usize,
    pub srhs_samples: usize,
    pub ip_samples: usize,
    pub round_cap: usize,
    pub max_steps: Step,
}

impl Default for SimulationKnobs {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            support_cap: p.support_cap,
            srhs_samples: p.srhs_samples,
            ip_samples: p.ip_samples,
            round_cap: p.round_cap,
            max_steps: p.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Network file, relative to the config file.
    pub network: PathBuf,
    pub vehicle_count: usize,
    /// Inclusive range of injection steps.
    pub injection_window: (Step, Step),
    pub waiting_budget_steps: Step,
    pub c_b_centi: i64,
    pub c_t_centi: i64,
    pub policies: Vec<PolicyKind>,
    pub horizon: usize,
    pub gating_minutes: u32,
    pub samples: usize,
    pub seed: u64,
    pub min_km: f64,
    pub max_km: f64,
    pub delays: DelayGenerator,
    pub simulation: SimulationKnobs,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            network: PathBuf::from("network.json"),
            vehicle_count: 100,
            injection_window: (78, 102),
            waiting_budget_steps: 4,
            c_b_centi: 170,
            c_t_centi: 2200,
            policies: PolicyKind::ALL.to_vec(),
            horizon: 2,
            gating_minutes: 20,
            samples: 50,
            seed: 0,
            min_km: 300.0,
            max_km: 800.0,
            delays: DelayGenerator::default(),
            simulation: SimulationKnobs::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a config and resolves its network path against the file's
    /// directory.
    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let path = path.as_ref();
        let mut config: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if config.network.is_relative() {
            if let Some(dir) = path.parent() {
                config.network = dir.join(&config.network);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.vehicle_count == 0 {
            problems.push("vehicle_count must be at least 1".to_string());
        }
        if self.samples == 0 {
            problems.push("samples must be at least 1".to_string());
        }
        if self.min_km.partial_cmp(&self.max_km) != Some(std::cmp::Ordering::Less) {
            problems.push(format!("min_km ({}) must be below max_km ({})", self.min_km, self.max_km));
        }
        if self.injection_window.0 > self.injection_window.1 {
            problems.push("injection_window start is after its end".to_string());
        }
        if self.policies.is_empty() {
            problems.push("policies must be nonempty".to_string());
        }
        if self.horizon == 0 {
            problems.push("horizon must be at least 1".to_string());
        }
        if self.c_b_centi < 0 || self.c_t_centi < 0 {
            problems.push("c_b_centi and c_t_centi must be nonnegative".to_string());
        }
        if self.delays.profiles == 0 {
            problems.push("delays.profiles must be at least 1".to_string());
        }
        if self.delays.min_peak_delay_steps > self.delays.max_peak_delay_steps {
            problems.push("delays.min_peak_delay_steps exceeds delays.max_peak_delay_steps".to_string());
        }
        if let Some(h) = &self.delays.heights {
            if h.len() != self.delays.profiles {
                problems.push(format!("delays.heights has {} entries for {} profiles", h.len(), self.delays.profiles));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn payoffs(&self) -> Payoffs {
        Payoffs::new(self.c_b_centi, self.c_t_centi)
    }

    pub fn policy(&self, kind: PolicyKind) -> Policy {
        let s = &self.simulation;
        Policy::with_config(
            kind,
            PolicyConfig {
                horizon: self.horizon,
                gating_minutes: self.gating_minutes,
                support_cap: s.support_cap,
                srhs_samples: s.srhs_samples,
                ip_samples: s.ip_samples,
                round_cap: s.round_cap,
                max_steps: s.max_steps,
            },
        )
    }

    /// The configured network with generated delay profiles on every edge.
    pub fn prepare_network(&self) -> Result<RoadNetwork> {
        let network = RoadNetwork::load_validated(&self.network)?;
        Ok(network_with_profiles(network, self))
    }
}

pub fn network_with_profiles(network: RoadNetwork, config: &ExperimentConfig) -> RoadNetwork {
    let profiles = generate_delay_profiles(&network, &config.delays, mix_seed(config.seed, 0));
    network.with_uniform_profiles(profiles)
}

/// `count` profiles covering every edge of the network; profile `k` has id `k`.
pub fn generate_delay_profiles(network: &RoadNetwork, generator: &DelayGenerator, seed: u64) -> Vec<DelayProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut profiles: Vec<DelayProfile> = (0..generator.profiles as u32).map(DelayProfile::new).collect();
    for e in network.edges() {
        for (k, profile) in profiles.iter_mut().enumerate() {
            let height = match &generator.heights {
                Some(h) => h[k],
                None => rng.gen_range(generator.min_peak_delay_steps..=generator.max_peak_delay_steps),
            };
            if height > 0 {
                for t in generator.peak_start_step..generator.peak_end_step {
                    profile.set(e.id, t, height);
                }
            }
        }
    }
    profiles
}

/// Origin/destination sampler with cached distances and paths.
pub struct FleetSampler<'a> {
    network: &'a RoadNetwork,
    origins: Option<WeightedIndex<f64>>,
    /// Feasible destinations per hub index, with their weights.
    feasible: Vec<Vec<(HubId, f64)>>,
    paths: HashMap<(HubId, HubId), Vec<crate::network::EdgeId>>,
}

impl<'a> FleetSampler<'a> {
    pub fn new(network: &'a RoadNetwork, min_km: f64, max_km: f64) -> Result<Self> {
        let hubs = network.hubs();
        if hubs.len() < 2 {
            return Err(Error::Config("the network needs at least two hubs".into()));
        }
        let weights: Vec<f64> = hubs.iter().map(|h| h.population_weight.max(0.0)).collect();
        let origins = WeightedIndex::new(&weights).ok();
        let feasible: Vec<Vec<(HubId, f64)>> = hubs
            .iter()
            .map(|o| {
                let dist = distances_from(network, o.id);
                hubs.iter()
                    .filter(|d| d.id != o.id && dist.get(&d.id).is_some_and(|&km| km > min_km && km < max_km))
                    .map(|d| (d.id, d.population_weight.max(0.0)))
                    .collect()
            })
            .collect();
        let reachable = hubs.iter().zip(&feasible).any(|(h, f)| h.population_weight > 0.0 && !f.is_empty());
        if origins.is_none() || !reachable {
            return Err(Error::Config(format!(
                "no origin with positive weight has a destination between {min_km} and {max_km} km"
            )));
        }
        Ok(Self { network, origins, feasible, paths: HashMap::new() })
    }

    /// Origin by population, destination by population among hubs in the
    /// distance band (renormalized per origin; uniform if all weigh zero),
    /// origins without a feasible destination redrawn.
    pub fn draw<R: Rng>(&mut self, rng: &mut R) -> (HubId, HubId, Vec<crate::network::EdgeId>) {
        let hubs = self.network.hubs();
        let origins = self.origins.as_ref().expect("checked at construction");
        loop {
            let o = origins.sample(rng);
            let options = &self.feasible[o];
            if options.is_empty() {
                continue;
            }
            let d = match WeightedIndex::new(options.iter().map(|x| x.1)) {
                Ok(w) => options[w.sample(rng)].0,
                Err(_) => options[rng.gen_range(0..options.len())].0,
            };
            let origin = hubs[o].id;
            let network = self.network;
            let path = self
                .paths
                .entry((origin, d))
                .or_insert_with(|| shortest_path(network, origin, d).expect("feasible pairs are connected").1)
                .clone();
            return (origin, d, path);
        }
    }
}

/// Vehicles `1..=N`; vehicle `j` depends only on `(seed, j)` so fleets of
/// different sizes share their first vehicles.
pub fn sample_fleet(network: &RoadNetwork, config: &ExperimentConfig, seed: u64) -> Result<Fleet> {
    let mut sampler = FleetSampler::new(network, config.min_km, config.max_km)?;
    let mut vehicles = Vec::with_capacity(config.vehicle_count);
    for j in 1..=config.vehicle_count as u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::from(j)));
        let (_, _, edges) = sampler.draw(&mut rng);
        let start = rng.gen_range(config.injection_window.0..=config.injection_window.1);
        vehicles.push(VehicleSpec {
            id: j,
            path: network.path(&edges)?,
            start_step: start,
            waiting_budget_steps: config.waiting_budget_steps,
        });
    }
    Fleet::new(vehicles)
}

/// Metrics of one or more traces, pooled.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TraceMetrics {
    pub platooning_rate: f64,
    pub followed_km: f64,
    pub traveled_km: f64,
    pub avg_wait_minutes: f64,
    pub total_utility_centi: i64,
    /// Step → followers on the road (platoon size − 1 per traversing platoon).
    pub follower_count_series: BTreeMap<Step, u64>,
    /// Platoon size → formations.
    pub platoon_length_histogram: BTreeMap<u32, u64>,
}

pub fn compute_metrics(traces: &[SimulationTrace], network: &RoadNetwork) -> TraceMetrics {
    let mut m = TraceMetrics::default();
    let mut waited: u64 = 0;
    let mut vehicles: u64 = 0;
    for trace in traces {
        for (_, _, e) in trace.departures() {
            m.traveled_km += network.edge(e).map_or(0.0, |e| e.length_km);
        }
        for p in trace.platoons() {
            let size = p.members.len() as u32;
            let length = network.edge(p.edge).map_or(0.0, |e| e.length_km);
            m.followed_km += f64::from(size - 1) * length;
            *m.platoon_length_histogram.entry(size).or_insert(0) += 1;
            for t in p.t..p.arrive {
                *m.follower_count_series.entry(t).or_insert(0) += u64::from(size - 1);
            }
        }
        waited += trace.waited_steps.values().map(|&w| u64::from(w)).sum::<u64>();
        vehicles += trace.waited_steps.len() as u64;
        m.total_utility_centi += trace.total_utility();
    }
    if m.traveled_km > 0.0 {
        m.platooning_rate = m.followed_km / m.traveled_km;
    }
    if vehicles > 0 {
        m.avg_wait_minutes = waited as f64 * f64::from(network.time_step_minutes()) / vehicles as f64;
    }
    m
}

/// Platooning rate rebuilt from the size histogram and per-size edge
/// lengths; equals the event-log rate by additivity.
pub fn rate_from_platoons(traces: &[SimulationTrace], network: &RoadNetwork) -> f64 {
    let traveled: f64 = traces
        .iter()
        .flat_map(|t| t.departures())
        .map(|(_, _, e)| network.edge(e).map_or(0.0, |e| e.length_km))
        .sum();
    let mut followed = 0.0;
    for trace in traces {
        for p in trace.platoons() {
            followed += (p.members.len() - 1) as f64 * network.edge(p.edge).map_or(0.0, |e| e.length_km);
        }
    }
    if traveled > 0.0 {
        followed / traveled
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std_error: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyReport {
    pub policy: PolicyKind,
    pub samples: usize,
    pub failures: usize,
    pub platooning_rate: Stat,
    pub avg_wait_minutes: Stat,
    pub total_utility_centi: Stat,
    pub total_utility_million_sek: f64,
    /// Mean over samples.
    pub follower_count_series: BTreeMap<Step, f64>,
    /// Summed over samples.
    pub platoon_length_histogram: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRecord {
    pub sample: usize,
    pub policy: PolicyKind,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub policies: Vec<PolicyReport>,
    pub failures: Vec<FailureRecord>,
}

impl MetricsReport {
    pub fn policy(&self, kind: PolicyKind) -> Option<&PolicyReport> {
        self.policies.iter().find(|p| p.policy == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RawRow {
    pub sample: usize,
    pub seed: u64,
    pub policy: PolicyKind,
    pub rate: f64,
    pub avg_wait_min: f64,
    pub total_utility_centi: i64,
}

pub struct SampleRun {
    pub sample: usize,
    pub seed: u64,
    pub policy: PolicyKind,
    pub outcome: std::result::Result<(TraceMetrics, Option<SimulationTrace>), String>,
}

pub struct ExperimentResult {
    pub report: MetricsReport,
    pub raw: Vec<RawRow>,
    /// Per sample and policy, in that order; metrics kept for paired
    /// comparisons.
    pub runs: Vec<SampleRun>,
}

impl ExperimentResult {
    /// Metric of `policy` in every sample where it succeeded.
    pub fn per_sample(&self, policy: PolicyKind) -> BTreeMap<usize, &TraceMetrics> {
        self.runs
            .iter()
            .filter(|r| r.policy == policy)
            .filter_map(|r| r.outcome.as_ref().ok().map(|(m, _)| (r.sample, m)))
            .collect()
    }

    pub fn traces(&self) -> impl Iterator<Item = (usize, PolicyKind, &SimulationTrace)> {
        self.runs
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().and_then(|(_, t)| t.as_ref()).map(|t| (r.sample, r.policy, t)))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub keep_traces: bool,
}

/// Seeds of one Monte Carlo sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleSeeds {
    pub sample: u64,
    pub fleet: u64,
    pub truth: u64,
    pub policy: u64,
}

impl SampleSeeds {
    pub fn new(master: u64, sample: usize) -> Self {
        let s = mix_seed(master, 1 + sample as u64);
        Self { sample: s, fleet: mix_seed(s, 1), truth: mix_seed(s, 2), policy: mix_seed(s, 3) }
    }
}

fn run_sample(
    config: &ExperimentConfig,
    network: &RoadNetwork,
    dist: &ScenarioDistribution,
    sample: usize,
    options: RunOptions,
) -> Vec<SampleRun> {
    let seeds = SampleSeeds::new(config.seed, sample);
    let payoffs = config.payoffs();
    let setup = sample_fleet(network, config, seeds.fleet).map(|fleet| {
        let truth = dist.sample_scenario(&mut ChaCha8Rng::seed_from_u64(seeds.truth));
        (fleet, truth)
    });
    config
        .policies
        .iter()
        .map(|&kind| {
            let outcome = match &setup {
                Err(e) => Err(e.to_string()),
                Ok((fleet, truth)) => run_closed_loop(network, fleet, dist, truth, &config.policy(kind), &payoffs, seeds.policy)
                    .map(|trace| {
                        let m = compute_metrics(std::slice::from_ref(&trace), network);
                        (m, options.keep_traces.then_some(trace))
                    })
                    .map_err(|e| e.to_string()),
            };
            SampleRun { sample, seed: seeds.sample, policy: kind, outcome }
        })
        .collect()
}

/// Runs every configured policy on `samples` shared (fleet, ground truth)
/// pairs. Failed runs are reported and excluded from the aggregates.
pub fn run_experiment(config: &ExperimentConfig, network: &RoadNetwork, options: RunOptions) -> Result<ExperimentResult> {
    config.validate()?;
    let dist = ScenarioDistribution::uniform(network);
    let runs: Vec<SampleRun> = (0..config.samples)
        .into_par_iter()
        .flat_map_iter(|s| run_sample(config, network, &dist, s, options))
        .collect();
    Ok(aggregate(config, runs))
}

fn aggregate(config: &ExperimentConfig, runs: Vec<SampleRun>) -> ExperimentResult {
    let mut raw = Vec::new();
    let mut failures = Vec::new();
    for r in &runs {
        match &r.outcome {
            Ok((m, _)) => raw.push(RawRow {
                sample: r.sample,
                seed: r.seed,
                policy: r.policy,
                rate: m.platooning_rate,
                avg_wait_min: m.avg_wait_minutes,
                total_utility_centi: m.total_utility_centi,
            }),
            Err(e) => {
                log::warn!("sample {} policy {} failed: {e}", r.sample, r.policy);
                failures.push(FailureRecord { sample: r.sample, policy: r.policy, error: e.clone() });
            }
        }
    }
    let policies = config
        .policies
        .iter()
        .map(|&kind| {
            let ok: Vec<&TraceMetrics> =
                runs.iter().filter(|r| r.policy == kind).filter_map(|r| r.outcome.as_ref().ok().map(|(m, _)| m)).collect();
            let n = ok.len();
            let utility = Stat::of(&ok.iter().map(|m| m.total_utility_centi as f64).collect::<Vec<_>>());
            let mut follower_count_series: BTreeMap<Step, f64> = BTreeMap::new();
            let mut platoon_length_histogram: BTreeMap<u32, u64> = BTreeMap::new();
            for m in &ok {
                for (&t, &c) in &m.follower_count_series {
                    *follower_count_series.entry(t).or_insert(0.0) += c as f64;
                }
                for (&s, &c) in &m.platoon_length_histogram {
                    *platoon_length_histogram.entry(s).or_insert(0) += c;
                }
            }
            if n > 0 {
                follower_count_series.values_mut().for_each(|v| *v /= n as f64);
            }
            PolicyReport {
                policy: kind,
                samples: n,
                failures: runs.iter().filter(|r| r.policy == kind && r.outcome.is_err()).count(),
                platooning_rate: Stat::of(&ok.iter().map(|m| m.platooning_rate).collect::<Vec<_>>()),
                avg_wait_minutes: Stat::of(&ok.iter().map(|m| m.avg_wait_minutes).collect::<Vec<_>>()),
                total_utility_centi: utility,
                total_utility_million_sek: utility.mean / 1e8,
                follower_count_series,
                platoon_length_histogram,
            }
        })
        .collect();
    ExperimentResult { report: MetricsReport { policies, failures }, raw, runs }
}

/// Writes `metrics.json`, `raw.csv`, `followers.csv` and `platoon_hist.csv`,
/// plus one JSON-lines trace per run under `traces/` when traces were kept.
pub fn write_outputs(dir: &FsPath, result: &ExperimentResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&result.report)? + "\n")?;

    let mut raw = csv::Writer::from_path(dir.join("raw.csv"))?;
    for row in &result.raw {
        raw.serialize(row)?;
    }
    raw.flush()?;

    let mut followers = csv::Writer::from_path(dir.join("followers.csv"))?;
    followers.write_record(["step", "policy", "count"])?;
    for p in &result.report.policies {
        for (t, c) in &p.follower_count_series {
            followers.write_record([t.to_string(), p.policy.to_string(), c.to_string()])?;
        }
    }
    followers.flush()?;

    let mut hist = csv::Writer::from_path(dir.join("platoon_hist.csv"))?;
    hist.write_record(["policy", "size", "count"])?;
    for p in &result.report.policies {
        for (s, c) in &p.platoon_length_histogram {
            hist.write_record([p.policy.to_string(), s.to_string(), c.to_string()])?;
        }
    }
    hist.flush()?;

    let mut traces = result.traces().peekable();
    if traces.peek().is_some() {
        let tdir = dir.join("traces");
        std::fs::create_dir_all(&tdir)?;
        for (sample, policy, trace) in traces {
            std::fs::write(tdir.join(format!("sample-{sample:04}-{policy}.jsonl")), trace.to_json_lines()?)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    VehicleCount,
    Budget,
    CB,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::VehicleCount => "vehicle_count",
            SweepAxis::Budget => "budget",
            SweepAxis::CB => "c_b",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vehicle_count" | "N" | "n" => Ok(SweepAxis::VehicleCount),
            "budget" => Ok(SweepAxis::Budget),
            "c_b" | "cb" => Ok(SweepAxis::CB),
            other => Err(Error::Config(format!("unknown sweep axis {other:?} (expected vehicle_count, budget or c_b)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    /// Axis value: vehicles, budget steps, or c_b in centi-SEK per km.
    pub value: i64,
    pub c_b_centi: i64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub values: Vec<i64>,
    pub c_b_values: Vec<i64>,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, value: i64, c_b_centi: i64) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.value == value && c.c_b_centi == c_b_centi)
    }
}

fn apply_axis(config: &ExperimentConfig, axis: SweepAxis, value: i64) -> Result<ExperimentConfig> {
    let mut c = config.clone();
    let nonneg = |v: i64| {
        u32::try_from(v).map_err(|_| Error::Config(format!("sweep value {v} is out of range for {axis}")))
    };
    match axis {
        SweepAxis::VehicleCount => c.vehicle_count = nonneg(value)? as usize,
        SweepAxis::Budget => c.waiting_budget_steps = nonneg(value)?,
        SweepAxis::CB => c.c_b_centi = i64::from(nonneg(value)?),
    }
    Ok(c)
}

/// Repeats the experiment over `values` of `axis` (crossed with
/// `c_b_values` unless the axis is `c_b` itself) with common random
/// numbers: every cell uses the same master seed.
pub fn sweep(
    config: &ExperimentConfig,
    network: &RoadNetwork,
    axis: SweepAxis,
    values: &[i64],
    c_b_values: &[i64],
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep values must be nonempty".into()));
    }
    let c_b_values: Vec<i64> = if axis == SweepAxis::CB || c_b_values.is_empty() { vec![config.c_b_centi] } else { c_b_values.to_vec() };
    let mut cells = Vec::new();
    for &c_b in &c_b_values {
        for &value in values {
            let mut c = apply_axis(config, axis, value)?;
            if axis != SweepAxis::CB {
                c.c_b_centi = c_b;
            }
            let result = run_experiment(&c, network, RunOptions::default())?;
            cells.push(SweepCell { value, c_b_centi: c.c_b_centi, report: result.report });
        }
    }
    Ok(SweepTable { axis, values: values.to_vec(), c_b_values, cells })
}

/// One CSV per metric: rows are (policy, c_b), columns the axis values.
pub fn write_sweep(dir: &FsPath, table: &SweepTable) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    type Column = (&'static str, fn(&PolicyReport) -> f64);
    let metrics: [Column; 3] = [
        ("rate", |p| p.platooning_rate.mean),
        ("wait_minutes", |p| p.avg_wait_minutes.mean),
        ("utility_million_sek", |p| p.total_utility_million_sek),
    ];
    let policies: Vec<PolicyKind> =
        table.cells.first().map(|c| c.report.policies.iter().map(|p| p.policy).collect()).unwrap_or_default();
    for (name, get) in metrics {
        let mut w = csv::Writer::from_path(dir.join(format!("sweep_{name}.csv")))?;
        let mut header = vec!["policy".to_string(), "c_b_sek".to_string()];
        header.extend(table.values.iter().map(|v| format!("{}={}", table.axis, axis_label(table.axis, *v))));
        w.write_record(&header)?;
        for &policy in &policies {
            for &c_b in &table.c_b_values {
                let mut row = vec![policy.to_string(), format!("{:.2}", c_b as f64 / 100.0)];
                for &v in &table.values {
                    let cell = table.cell(v, if table.axis == SweepAxis::CB { v } else { c_b });
                    let value = cell.and_then(|c| c.report.policy(policy)).map(get);
                    row.push(value.map_or_else(String::new, |x| x.to_string()));
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
    }
    std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(table)? + "\n")?;
    Ok(())
}

fn axis_label(axis: SweepAxis, v: i64) -> String {
    match axis {
        SweepAxis::CB => format!("{:.2}", v as f64 / 100.0),
        _ => v.to_string(),
    }
}
