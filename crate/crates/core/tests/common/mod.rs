//! Random small instances and a from-scratch reference evaluator.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use platoon_core::game::{ActionProfile, Fleet, Payoffs, Scenario, VehicleSpec, WaitingVector};
use platoon_core::network::{DelayProfile, Edge, EdgeId, Hub, RoadNetwork, Step};
use platoon_core::stochastic::ScenarioDistribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const C_B: i64 = 170;
pub const C_T: i64 = 2200;

pub struct Instance {
    pub network: RoadNetwork,
    pub fleet: Fleet,
    /// Uniform over the two profiles of every edge that has them.
    pub dist: ScenarioDistribution,
    pub truth: Scenario,
}

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub hubs: usize,
    pub edges: usize,
    pub vehicles: usize,
    pub budget: Step,
    pub max_path: usize,
    pub max_start: Step,
    /// Edges carrying two profiles.
    pub uncertain_edges: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self { hubs: 5, edges: 8, vehicles: 4, budget: 3, max_path: 3, max_start: 4, uncertain_edges: 4 }
    }
}

pub fn hub(id: u32) -> Hub {
    Hub { id, name: format!("h{id}"), population_weight: 1.0, lat: None, lon: None }
}

pub fn edge(id: EdgeId, tail: u32, head: u32, km: f64, base: Step) -> Edge {
    Edge { id, tail, head, length_km: km, base_travel_steps: base, delay_profile_ids: vec![] }
}

pub fn payoffs() -> Payoffs {
    Payoffs::new(C_B, C_T)
}

/// Hub count, edges and fleet drawn from `seed`; profile 0 is delay-free,
/// profile 1 adds 1..=2 steps at a few early entry steps.
pub fn random_instance(seed: u64, limits: Limits) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_hubs = rng.gen_range(2..=limits.hubs) as u32;
    let hubs: Vec<Hub> = (1..=n_hubs).map(hub).collect();

    let mut order: Vec<u32> = (1..=n_hubs).collect();
    order.shuffle(&mut rng);
    let mut pairs: Vec<(u32, u32)> = order.windows(2).map(|w| (w[0], w[1])).collect();
    let extra = rng.gen_range(0..=limits.edges.saturating_sub(pairs.len()));
    for _ in 0..extra * 3 {
        if pairs.len() >= limits.edges || pairs.len() >= (n_hubs * (n_hubs - 1)) as usize {
            break;
        }
        let (a, b) = (rng.gen_range(1..=n_hubs), rng.gen_range(1..=n_hubs));
        if a != b && !pairs.contains(&(a, b)) {
            pairs.push((a, b));
        }
    }

    let mut uncertain: Vec<usize> = (0..pairs.len()).collect();
    uncertain.shuffle(&mut rng);
    uncertain.truncate(rng.gen_range(0..=limits.uncertain_edges.min(pairs.len())));
    let mut slow = DelayProfile::new(1);
    let edges: Vec<Edge> = pairs
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| {
            let id = k as EdgeId + 1;
            let mut e = edge(id, a, b, f64::from(rng.gen_range(20..=150u32)), rng.gen_range(1..=3));
            if uncertain.contains(&k) {
                e.delay_profile_ids = vec![0, 1];
                for t in 0..12 {
                    if rng.gen_bool(0.4) {
                        slow.set(id, t, rng.gen_range(1..=2));
                    }
                }
            }
            e
        })
        .collect();
    let network = RoadNetwork::new(5, hubs, edges, vec![DelayProfile::new(0), slow]);

    let n_vehicles = rng.gen_range(1..=limits.vehicles) as u32;
    let mut vehicles = Vec::new();
    for id in 1..=n_vehicles {
        let path = loop {
            let mut at = rng.gen_range(1..=n_hubs);
            let mut seen = BTreeSet::from([at]);
            let mut path = Vec::new();
            let len = rng.gen_range(1..=limits.max_path);
            while path.len() < len {
                let out: Vec<&Edge> = network.edges().iter().filter(|e| e.tail == at && !seen.contains(&e.head)).collect();
                let Some(e) = out.choose(&mut rng) else { break };
                path.push(e.id);
                seen.insert(e.head);
                at = e.head;
            }
            if !path.is_empty() {
                break path;
            }
        };
        vehicles.push(VehicleSpec {
            id,
            path: network.path(&path).unwrap(),
            start_step: rng.gen_range(0..=limits.max_start),
            waiting_budget_steps: rng.gen_range(0..=limits.budget),
        });
    }
    let fleet = Fleet::new(vehicles).unwrap();

    let dist = ScenarioDistribution {
        edges: network
            .edges()
            .iter()
            .filter(|e| !e.delay_profile_ids.is_empty())
            .map(|e| (e.id, vec![(0, Ratio::new(1, 2)), (1, Ratio::new(1, 2))]))
            .collect(),
        starts: BTreeMap::new(),
    };
    let truth = Scenario::new(
        network.edges().iter().filter(|e| !e.delay_profile_ids.is_empty()).map(|e| (e.id, rng.gen_range(0..2))).collect(),
        BTreeMap::new(),
    );
    Instance { network, fleet, dist, truth }
}

/// A random feasible action for every vehicle.
pub fn random_profile(fleet: &Fleet, rng: &mut impl Rng) -> ActionProfile {
    ActionProfile(fleet.vehicles().iter().map(|v| random_waits(v, rng)).collect())
}

pub fn random_waits(v: &VehicleSpec, rng: &mut impl Rng) -> WaitingVector {
    let mut left = v.waiting_budget_steps;
    let mut w = vec![0; v.path.len()];
    for slot in w.iter_mut() {
        let x = rng.gen_range(0..=left);
        *slot = x;
        left -= x;
    }
    w.shuffle(rng);
    WaitingVector(w)
}

/// Entry step of every vehicle on every edge of its path.
pub fn reference_entries(inst: &Instance, profile: &ActionProfile, scenario: &Scenario) -> Vec<Vec<(EdgeId, Step)>> {
    inst.fleet
        .vehicles()
        .iter()
        .zip(&profile.0)
        .map(|(v, w)| {
            let mut t = scenario.start_steps.get(&v.id).copied().unwrap_or(v.start_step);
            let mut out = Vec::new();
            for (k, &e) in v.path.edges().iter().enumerate() {
                t += w.0[k];
                out.push((e, t));
                let edge = inst.network.edge(e).unwrap();
                let delay = scenario
                    .profile_assignment
                    .get(&e)
                    .map_or(0, |&p| inst.network.profile(p).unwrap().delay(e, t));
                t += edge.base_travel_steps + delay;
            }
            out
        })
        .collect()
}

fn share(km: f64, n: usize) -> i64 {
    (C_B as f64 * km * (n - 1) as f64 / n as f64).round() as i64
}

/// Utilities and potential recomputed from raw departure times.
pub fn reference_eval(inst: &Instance, profile: &ActionProfile, scenario: &Scenario) -> (Vec<i64>, i64) {
    let entries = reference_entries(inst, profile, scenario);
    let mut groups: BTreeMap<(EdgeId, Step), Vec<usize>> = BTreeMap::new();
    for (i, list) in entries.iter().enumerate() {
        for &key in list {
            groups.entry(key).or_default().push(i);
        }
    }
    let mut utilities: Vec<i64> = profile.0.iter().map(|w| -C_T * i64::from(w.0.iter().sum::<Step>())).collect();
    let mut potential: i64 = utilities.iter().sum();
    for ((e, _), members) in &groups {
        let km = inst.network.edge(*e).unwrap().length_km;
        for &i in members {
            utilities[i] += share(km, members.len());
        }
        potential += (1..=members.len()).map(|n| share(km, n)).sum::<i64>();
    }
    (utilities, potential)
}
