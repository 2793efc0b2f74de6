//! Acceptance criteria, one line each. Runs without the libtest harness so
//! every verdict prints even when earlier ones fail.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use common::{edge, hub, payoffs, random_instance, random_profile, random_waits, reference_eval, Instance, Limits};
use num_rational::Ratio;
use platoon_core::experiment::{
    compute_metrics, network_with_profiles, run_experiment, sweep, write_outputs, write_sweep, ExperimentConfig, ExperimentResult,
    RunOptions, SweepAxis,
};
use platoon_core::game::{self, ActionProfile, Fleet, Scenario, VehicleSpec};
use platoon_core::network::{DelayProfile, RoadNetwork};
use platoon_core::oracle::PlatoonGame;
use platoon_core::sim::{
    conditional_distribution, run_closed_loop, run_closed_loop_observed, Policy, PolicyKind, Traversal, WorldState,
};
use platoon_core::solver::{brute_force_potential_max, nash_seek, verify_ne, ActionSpace, SolveOptions, UtilityOracle};
use platoon_core::stochastic::{enumerate_support, expected_potential, expected_utility, ScenarioDistribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DETERMINISTIC_TRIPLES: u64 = 1000;
const STOCHASTIC_TRIPLES: u64 = 500;
const SOLVER_INSTANCES: u64 = 200;
const COLLAPSE_INSTANCES: u64 = 20;
const CONDITIONING_STEPS: usize = 1000;
const PAIRED_FRACTION: f64 = 0.8;
const TREND_SAMPLES: usize = 20;
const BRUTE_FORCE_LIMIT: u128 = 100_000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed < Duration::from_secs(limit_s)
}

fn spaces(inst: &Instance) -> Vec<ActionSpace> {
    inst.fleet.vehicles().iter().map(ActionSpace::for_vehicle).collect()
}

fn synthetic() -> RoadNetwork {
    RoadNetwork::load_validated(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/synthetic-10.json")).unwrap()
}

fn deviation(inst: &Instance, rng: &mut ChaCha8Rng) -> (usize, ActionProfile, ActionProfile) {
    let before = random_profile(&inst.fleet, rng);
    let i = rng.gen_range(0..inst.fleet.len());
    let after = before.with(i, random_waits(&inst.fleet.vehicles()[i], rng));
    (i, before, after)
}

fn exact_potential_deterministic() -> Verdict {
    let start = Instant::now();
    let mut bad = 0;
    for seed in 0..DETERMINISTIC_TRIPLES {
        let inst = random_instance(seed, Limits::default());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, before, after) = deviation(&inst, &mut rng);
        let id = inst.fleet.vehicles()[i].id;
        let p = payoffs();
        let du = game::utility(&inst.network, &inst.fleet, id, &after, &inst.truth, &p).unwrap()
            - game::utility(&inst.network, &inst.fleet, id, &before, &inst.truth, &p).unwrap();
        let dphi = game::potential(&inst.network, &inst.fleet, &after, &inst.truth, &p).unwrap()
            - game::potential(&inst.network, &inst.fleet, &before, &inst.truth, &p).unwrap();
        let (u0, phi0) = reference_eval(&inst, &before, &inst.truth);
        let (u1, phi1) = reference_eval(&inst, &after, &inst.truth);
        if dphi != du || du != u1[i] - u0[i] || dphi != phi1 - phi0 {
            bad += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(bad == 0 && within(elapsed, 10), format!("{DETERMINISTIC_TRIPLES} triples, {bad} mismatches, {elapsed:.2?} (< 10 s)"))
}

fn exact_potential_stochastic() -> Verdict {
    let start = Instant::now();
    let mut bad = 0;
    let mut largest = 0;
    for seed in 0..STOCHASTIC_TRIPLES {
        let inst = random_instance(seed + 10_000, Limits::default());
        let support = enumerate_support(&inst.dist, 16).unwrap();
        largest = largest.max(support.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (i, before, after) = deviation(&inst, &mut rng);
        let id = inst.fleet.vehicles()[i].id;
        let p = payoffs();
        let du = expected_utility(&inst.network, &inst.fleet, id, &after, &support, &p).unwrap()
            - expected_utility(&inst.network, &inst.fleet, id, &before, &support, &p).unwrap();
        let dphi = expected_potential(&inst.network, &inst.fleet, &after, &support, &p).unwrap()
            - expected_potential(&inst.network, &inst.fleet, &before, &support, &p).unwrap();
        let mut reference = Ratio::from_integer(0i128);
        for k in 0..support.len() {
            let scenario = &support.entries()[k].0;
            let (u0, _) = reference_eval(&inst, &before, scenario);
            let (u1, _) = reference_eval(&inst, &after, scenario);
            reference += support.probability(k) * i128::from(u1[i] - u0[i]);
        }
        if dphi != du || du != reference {
            bad += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        bad == 0 && largest <= 16 && within(elapsed, 30),
        format!("{STOCHASTIC_TRIPLES} triples, supports <= {largest}, {bad} mismatches, {elapsed:.2?} (< 30 s)"),
    )
}

fn game_for(inst: &Instance, stochastic: bool) -> PlatoonGame<'_> {
    if stochastic {
        PlatoonGame::stochastic(&inst.network, &inst.fleet, &enumerate_support(&inst.dist, 16).unwrap(), &payoffs()).unwrap()
    } else {
        PlatoonGame::deterministic(&inst.network, &inst.fleet, &inst.truth, &payoffs()).unwrap()
    }
}

fn solver_soundness() -> Verdict {
    let start = Instant::now();
    let mut bad = Vec::new();
    let mut max_rounds = 0;
    for seed in 0..SOLVER_INSTANCES {
        let inst = random_instance(seed + 20_000, Limits::default());
        let game = game_for(&inst, seed % 2 == 1);
        let options = SolveOptions { track_potential: true, verify: true, ..SolveOptions::default() };
        match nash_seek(&game, ActionProfile::zeros(&inst.fleet), &spaces(&inst), &options) {
            Ok(r) => {
                max_rounds = max_rounds.max(r.rounds);
                let increasing = r.potential_trajectory.unwrap().windows(2).all(|w| w[1] > w[0]);
                if !r.verified || !increasing {
                    bad.push(seed);
                }
            }
            Err(_) => bad.push(seed),
        }
    }
    let elapsed = start.elapsed();
    verdict(
        bad.is_empty() && within(elapsed, 60),
        format!("{SOLVER_INSTANCES} instances, max {max_rounds} rounds, failures {bad:?}, {elapsed:.2?} (< 60 s)"),
    )
}

fn brute_force_oracle() -> Verdict {
    let mut checked = 0;
    let mut bad = Vec::new();
    for seed in 0..SOLVER_INSTANCES {
        let inst = random_instance(seed + 20_000, Limits::default());
        let game = game_for(&inst, seed % 2 == 1);
        let spaces = spaces(&inst);
        let Some((best, phi_max)) = brute_force_potential_max(&game, &spaces, BRUTE_FORCE_LIMIT) else { continue };
        checked += 1;
        let zeros = ActionProfile::zeros(&inst.fleet);
        let found = nash_seek(&game, zeros.clone(), &spaces, &SolveOptions::default()).unwrap().profile;
        let phi = game.potential(&found).unwrap();
        if !verify_ne(&best, &game, &spaces).unwrap() || phi < game.potential(&zeros).unwrap() || phi > phi_max {
            bad.push(seed);
        }
    }
    verdict(bad.is_empty() && checked > 0, format!("{checked} instances with <= {BRUTE_FORCE_LIMIT} profiles, failures {bad:?}"))
}

fn degenerate_collapse() -> Verdict {
    let limits = Limits { max_path: 2, max_start: 4, ..Limits::default() };
    let mut identical_all = 0;
    let mut identical_without_sp = 0;
    let mut errors = 0;
    for seed in 0..COLLAPSE_INSTANCES {
        let inst = random_instance(seed + 30_000, limits);
        let point = ScenarioDistribution::point_mass(&inst.truth);
        let sets: Result<BTreeMap<PolicyKind, _>, _> = PolicyKind::ALL
            .iter()
            .map(|&kind| {
                run_closed_loop(&inst.network, &inst.fleet, &point, &inst.truth, &Policy::new(kind), &payoffs(), seed)
                    .map(|t| (kind, t.platoon_set()))
            })
            .collect();
        let Ok(sets) = sets else {
            errors += 1;
            continue;
        };
        let ktt = &sets[&PolicyKind::Ktt];
        if sets.iter().filter(|(k, _)| **k != PolicyKind::Sp).all(|(_, s)| s == ktt) {
            identical_without_sp += 1;
            if &sets[&PolicyKind::Sp] == ktt {
                identical_all += 1;
            }
        }
    }
    let n = COLLAPSE_INSTANCES;
    verdict(
        identical_all == n && errors == 0,
        format!("{n} instances: all five identical in {identical_all}, IP/KTT/DRHS/SRHS identical in {identical_without_sp}, {errors} errors"),
    )
}

/// Edge 1 has profiles 0 (travel 3) and 1 (travel 5 when entered at 0).
fn two_profile_edge() -> (RoadNetwork, Fleet, ScenarioDistribution) {
    let mut feeder = edge(1, 1, 2, 20.0, 3);
    feeder.delay_profile_ids = vec![0, 1];
    let net = RoadNetwork::new(5, vec![hub(1), hub(2)], vec![feeder], vec![DelayProfile::new(0), DelayProfile::with_entries(1, [(1, 0, 2)])]);
    let fleet = Fleet::new(vec![VehicleSpec { id: 1, path: net.path(&[1]).unwrap(), start_step: 0, waiting_budget_steps: 0 }]).unwrap();
    let half = Ratio::new(1, 2);
    let prior = ScenarioDistribution { edges: BTreeMap::from([(1, vec![(0, half), (1, half)])]), starts: BTreeMap::new() };
    (net, fleet, prior)
}

fn conditioning() -> Verdict {
    let (net, fleet, prior) = two_profile_edge();
    let only = |p| vec![(p, Ratio::from_integer(1))];
    let mut world = WorldState::new(&fleet, Scenario::new(BTreeMap::from([(1, 1)]), BTreeMap::new()));
    let mut examples = conditional_distribution(&prior, &net, &world).ok() == Some(prior.clone());
    world.t = 4;
    world.history.push(Traversal { vehicle: 1, edge: 1, entered: 0, travel: None });
    examples &= conditional_distribution(&prior, &net, &world).map(|d| d.edges[&1].clone()).ok() == Some(only(1));
    world.history[0].travel = Some(3);
    examples &= conditional_distribution(&prior, &net, &world).map(|d| d.edges[&1].clone()).ok() == Some(only(0));
    world.history[0].travel = Some(4);
    examples &= conditional_distribution(&prior, &net, &world).is_err();

    let mut steps = 0;
    let mut lost = 0;
    let mut seed = 40_000;
    while steps < CONDITIONING_STEPS {
        let inst = random_instance(seed, Limits { vehicles: 6, max_path: 3, max_start: 8, ..Limits::default() });
        let kind = if seed % 2 == 0 { PolicyKind::Drhs } else { PolicyKind::Srhs };
        let truth = inst.truth.clone();
        let dist = inst.dist.clone();
        let mut observe = |_: &platoon_core::sim::SimContext<'_>, world: &WorldState| {
            steps += 1;
            let post = conditional_distribution(&dist, &inst.network, world)?;
            let kept = truth.profile_assignment.iter().all(|(e, p)| post.edges[e].iter().any(|(q, pr)| q == p && *pr > Ratio::from_integer(0)));
            let normalized = post.edges.values().all(|l| l.iter().map(|x| x.1).sum::<Ratio<i64>>() == Ratio::from_integer(1));
            if !kept || !normalized {
                lost += 1;
            }
            Ok(())
        };
        if run_closed_loop_observed(&inst.network, &inst.fleet, &inst.dist, &inst.truth, &Policy::new(kind), &payoffs(), seed, &mut observe)
            .is_err()
        {
            lost += 1;
        }
        seed += 1;
    }
    verdict(examples && lost == 0, format!("constructed examples {}, {steps} closed-loop steps, truth lost {lost} times", if examples { "ok" } else { "wrong" }))
}

fn paired_fraction(result: &ExperimentResult, a: PolicyKind, b: PolicyKind) -> f64 {
    let xa = result.per_sample(a);
    let xb = result.per_sample(b);
    let hits = xa.iter().filter(|(s, m)| xb.get(s).is_some_and(|mb| m.total_utility_centi >= mb.total_utility_centi)).count();
    hits as f64 / xa.len().max(1) as f64
}

fn trend() -> Verdict {
    use PolicyKind::*;
    let start = Instant::now();
    let order = [Ktt, Srhs, Drhs, Ip, Sp];
    let mut pass = true;
    let mut detail = Vec::new();
    let mut rates: BTreeMap<PolicyKind, Vec<f64>> = BTreeMap::new();
    for n in [50, 100, 200] {
        let config = ExperimentConfig { vehicle_count: n, samples: TREND_SAMPLES, ..ExperimentConfig::default() };
        let net = network_with_profiles(synthetic(), &config);
        let result = run_experiment(&config, &net, RunOptions::default()).unwrap();
        pass &= result.report.failures.is_empty();
        let mean = |k| result.report.policy(k).unwrap().total_utility_centi.mean;
        let mut cell = format!("N={n}:");
        for w in order.windows(2) {
            let f = paired_fraction(&result, w[0], w[1]);
            let ok = mean(w[0]) >= mean(w[1]) && f >= PAIRED_FRACTION;
            pass &= ok;
            cell += &format!(" {}>={} {:.2}{}", w[0], w[1], f, if ok { "" } else { "!" });
        }
        pass &= result.report.policy(Sp).unwrap().avg_wait_minutes.mean == 0.0;
        for k in order {
            rates.entry(k).or_default().push(result.report.policy(k).unwrap().platooning_rate.mean);
        }
        detail.push(cell);
    }
    let increasing = rates.values().all(|r| r.windows(2).all(|w| w[1] > w[0]));
    pass &= increasing;
    let elapsed = start.elapsed();
    pass &= within(elapsed, 300);
    verdict(pass, format!("{}; rates increasing {increasing}; SP wait 0; {elapsed:.1?} (< 300 s)", detail.join("; ")))
}

fn monotonicity() -> Verdict {
    let config = ExperimentConfig { vehicle_count: 100, samples: TREND_SAMPLES, policies: vec![PolicyKind::Drhs], ..ExperimentConfig::default() };
    let net = network_with_profiles(synthetic(), &config);
    let check = |table: &platoon_core::experiment::SweepTable| -> (bool, Vec<String>) {
        let stats: Vec<_> = table.cells.iter().map(|c| c.report.policy(PolicyKind::Drhs).unwrap().platooning_rate).collect();
        let ok = stats.windows(2).all(|w| w[1].mean >= w[0].mean - (w[0].std_error.powi(2) + w[1].std_error.powi(2)).sqrt());
        (ok, stats.iter().map(|s| format!("{:.3}", s.mean)).collect())
    };
    let (budget_ok, budget) = check(&sweep(&config, &net, SweepAxis::Budget, &[1, 2, 3, 4], &[]).unwrap());
    let (cb_ok, cb) = check(&sweep(&config, &net, SweepAxis::CB, &[50, 170, 400], &[]).unwrap());
    verdict(budget_ok && cb_ok, format!("DRHS rate over budget 1..4 {budget:?}, over c_b 0.5/1.7/4.0 {cb:?}"))
}

fn sp_run(net: &RoadNetwork, starts: &[u32]) -> platoon_core::sim::SimulationTrace {
    let vehicles = starts
        .iter()
        .enumerate()
        .map(|(k, &s)| VehicleSpec { id: k as u32 + 1, path: net.path(&[1]).unwrap(), start_step: s, waiting_budget_steps: 0 })
        .collect();
    let fleet = Fleet::new(vehicles).unwrap();
    run_closed_loop(net, &fleet, &ScenarioDistribution::default(), &Scenario::default(), &Policy::new(PolicyKind::Sp), &payoffs(), 0)
        .unwrap()
}

fn metrics_arithmetic() -> Verdict {
    let net = RoadNetwork::new(5, vec![hub(1), hub(2)], vec![edge(1, 1, 2, 100.0, 3)], vec![]);
    let pair = compute_metrics(&[sp_run(&net, &[0, 0])], &net);
    let triple = compute_metrics(&[sp_run(&net, &[0, 0, 0])], &net);
    let rate = pair.platooning_rate == 0.5;
    let hist = triple.platoon_length_histogram == BTreeMap::from([(3, 1)]);
    let followers = triple.follower_count_series.values().all(|&c| c == 2) && triple.follower_count_series.len() == 3;
    verdict(rate && hist && followers, format!("rate {} (0.5), histogram {:?} ({{3: 1}}), followers {:?} (2)", pair.platooning_rate, triple.platoon_length_histogram, triple.follower_count_series))
}

fn determinism() -> Verdict {
    let config = ExperimentConfig { vehicle_count: 30, samples: 3, ..ExperimentConfig::default() };
    let net = network_with_profiles(synthetic(), &config);
    let snapshot = || -> BTreeMap<String, Vec<u8>> {
        let dir = tempfile::tempdir().unwrap();
        write_outputs(dir.path(), &run_experiment(&config, &net, RunOptions { keep_traces: true }).unwrap()).unwrap();
        write_sweep(&dir.path().join("sweep"), &sweep(&config, &net, SweepAxis::Budget, &[1, 3], &[50, 170]).unwrap()).unwrap();
        let mut files = BTreeMap::new();
        let mut stack = vec![dir.path().to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    files.insert(path.strip_prefix(dir.path()).unwrap().display().to_string(), std::fs::read(&path).unwrap());
                }
            }
        }
        files
    };
    let a = snapshot();
    let b = snapshot();
    let differing: BTreeSet<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    verdict(differing.is_empty() && a.len() > 10, format!("{} files compared, differing {differing:?}", a.len()))
}

fn main() {
    type Criterion = (&'static str, fn() -> Verdict);
    let criteria: [Criterion; 10] = [
        ("exact potential, deterministic", exact_potential_deterministic),
        ("exact potential, stochastic", exact_potential_stochastic),
        ("best-response soundness", solver_soundness),
        ("brute-force oracle", brute_force_oracle),
        ("degenerate-distribution collapse", degenerate_collapse),
        ("conditioning correctness", conditioning),
        ("trend reproduction", trend),
        ("budget and benefit monotonicity", monotonicity),
        ("metrics arithmetic", metrics_arithmetic),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        println!("criterion {:>2} {:<34} {}  {}", k + 1, name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(k + 1);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
