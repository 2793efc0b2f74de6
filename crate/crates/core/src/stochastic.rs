//! Stochastic travel times: finite-support scenario distributions and the
//! expected-utility game.
//!
//! Edges draw their delay profile independently and vehicles draw their
//! start step independently, so a joint scenario's probability is the
//! product of its marginals. Probabilities are exact rationals. A support
//! stores integer weights over a common denominator, which keeps expected
//! utilities exact and cheap to compare.

use std::collections::BTreeMap;
use std::path::Path as FsPath;

use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::game::{potential, utility, ActionProfile, Fleet, Payoffs, Scenario, VehicleId};
use crate::network::{EdgeId, ProfileId, RoadNetwork, Step};
use crate::oracle::PlatoonGame;

pub const DEFAULT_SUPPORT_CAP: usize = 4096;

pub type Probability = Ratio<i64>;

/// Independent marginals over edge delay profiles and vehicle start steps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioDistribution {
    pub edges: BTreeMap<EdgeId, Vec<(ProfileId, Probability)>>,
    /// Vehicles absent here start deterministically at their nominal step.
    pub starts: BTreeMap<VehicleId, Vec<(Step, Probability)>>,
}

impl ScenarioDistribution {
    /// Equal probability over each edge's admissible profiles.
    pub fn uniform(network: &RoadNetwork) -> Self {
        let edges = network
            .edges()
            .iter()
            .filter(|e| !e.delay_profile_ids.is_empty())
            .map(|e| {
                let p = Ratio::new(1, e.delay_profile_ids.len() as i64);
                (e.id, e.delay_profile_ids.iter().map(|&id| (id, p)).collect())
            })
            .collect();
        Self { edges, starts: BTreeMap::new() }
    }

    pub fn point_mass(scenario: &Scenario) -> Self {
        Self {
            edges: scenario.profile_assignment.iter().map(|(&e, &p)| (e, vec![(p, Ratio::one())])).collect(),
            starts: scenario.start_steps.iter().map(|(&v, &t)| (v, vec![(t, Ratio::one())])).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn check<K: PartialEq + std::fmt::Display>(what: &str, list: &[(K, Probability)]) -> Result<()> {
            if list.is_empty() {
                return Err(invalid(format!("{what}: empty marginal")));
            }
            for (k, (a, p)) in list.iter().enumerate() {
                if *p <= Ratio::zero() {
                    return Err(invalid(format!("{what}: outcome {a} has nonpositive probability")));
                }
                if list[..k].iter().any(|(b, _)| b == a) {
                    return Err(invalid(format!("{what}: outcome {a} listed twice")));
                }
            }
            let total: Probability = list.iter().map(|(_, p)| *p).sum();
            if !total.is_one() {
                return Err(invalid(format!("{what}: probabilities sum to {total}, not 1")));
            }
            Ok(())
        }
        for (e, list) in &self.edges {
            check(&format!("edge {e}"), list)?;
        }
        for (v, list) in &self.starts {
            check(&format!("vehicle {v}"), list)?;
        }
        Ok(())
    }

    /// Checks that every listed profile is admissible on its edge.
    pub fn validate_against(&self, network: &RoadNetwork, fleet: Option<&Fleet>) -> Result<()> {
        self.validate()?;
        for (e, list) in &self.edges {
            let edge = network.edge(*e).ok_or_else(|| invalid(format!("distribution names unknown edge {e}")))?;
            if let Some((p, _)) = list.iter().find(|(p, _)| !edge.delay_profile_ids.contains(p)) {
                return Err(invalid(format!("delay profile {p} is not admissible on edge {e}")));
            }
        }
        for e in network.edges() {
            if !e.delay_profile_ids.is_empty() && !self.edges.contains_key(&e.id) {
                return Err(invalid(format!("distribution does not cover edge {}", e.id)));
            }
        }
        if let Some(fleet) = fleet {
            if let Some(v) = self.starts.keys().find(|v| fleet.get(**v).is_none()) {
                return Err(invalid(format!("distribution names unknown vehicle {v}")));
            }
        }
        Ok(())
    }

    /// Adds a uniform marginal for every edge with admissible profiles that
    /// the distribution leaves out.
    pub fn completed(mut self, network: &RoadNetwork) -> Self {
        for (e, list) in Self::uniform(network).edges {
            self.edges.entry(e).or_insert(list);
        }
        self
    }

    /// Draws one joint scenario.
    pub fn sample_scenario<R: Rng + ?Sized>(&self, rng: &mut R) -> Scenario {
        fn draw<K: Copy, R: Rng + ?Sized>(list: &[(K, Probability)], rng: &mut R) -> K {
            let (weights, lcm) = integer_weights(list);
            let mut u = rng.gen_range(0..lcm);
            for (k, w) in &weights {
                if u < *w {
                    return *k;
                }
                u -= w;
            }
            weights.last().expect("validated marginals are nonempty").0
        }
        Scenario {
            profile_assignment: self.edges.iter().map(|(&e, l)| (e, draw(l, rng))).collect(),
            start_steps: self.starts.iter().map(|(&v, l)| (v, draw(l, rng))).collect(),
        }
    }

    /// Number of joint scenarios.
    pub fn support_size(&self) -> u128 {
        self.edges
            .values()
            .map(Vec::len)
            .chain(self.starts.values().map(Vec::len))
            .fold(1u128, |acc, n| acc.saturating_mul(n as u128))
    }

    /// Marginal over a subset of edges (the others are dropped).
    pub fn restricted_to(&self, edges: impl IntoIterator<Item = EdgeId>) -> Self {
        let edges = edges.into_iter().filter_map(|e| self.edges.get(&e).map(|l| (e, l.clone()))).collect();
        Self { edges, starts: self.starts.clone() }
    }

    /// Probability-weighted mean of `f` over an edge's profiles.
    pub fn edge_mean(&self, edge: EdgeId, f: impl Fn(ProfileId) -> i64) -> Option<Ratio<i64>> {
        self.edges.get(&edge).map(|list| list.iter().map(|&(p, pr)| pr * f(p)).sum())
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let file: DistributionFile = serde_json::from_str(s)?;
        let mut dist = Self::default();
        for e in file.edges {
            let list = e.profiles.iter().map(|p| Ok((p.id, ratio(p.p_num, p.p_den)?))).collect::<Result<Vec<_>>>()?;
            if dist.edges.insert(e.edge, list).is_some() {
                return Err(invalid(format!("edge {} listed twice", e.edge)));
            }
        }
        for s in file.starts {
            let list = s.steps.iter().map(|p| Ok((p.t, ratio(p.p_num, p.p_den)?))).collect::<Result<Vec<_>>>()?;
            if dist.starts.insert(s.vehicle, list).is_some() {
                return Err(invalid(format!("vehicle {} listed twice", s.vehicle)));
            }
        }
        dist.validate()?;
        Ok(dist)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = DistributionFile {
            edges: self
                .edges
                .iter()
                .map(|(&edge, list)| EdgeMarginalFile {
                    edge,
                    profiles: list.iter().map(|(id, p)| ProfileProbFile { id: *id, p_num: *p.numer(), p_den: *p.denom() }).collect(),
                })
                .collect(),
            starts: self
                .starts
                .iter()
                .map(|(&vehicle, list)| StartMarginalFile {
                    vehicle,
                    steps: list.iter().map(|(t, p)| StepProbFile { t: *t, p_num: *p.numer(), p_den: *p.denom() }).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

fn ratio(num: i64, den: i64) -> Result<Probability> {
    if den <= 0 || num < 0 {
        return Err(invalid(format!("invalid probability {num}/{den}")));
    }
    Ok(Ratio::new(num, den))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileProbFile {
    id: ProfileId,
    p_num: i64,
    p_den: i64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepProbFile {
    t: Step,
    p_num: i64,
    p_den: i64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeMarginalFile {
    edge: EdgeId,
    profiles: Vec<ProfileProbFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StartMarginalFile {
    vehicle: VehicleId,
    steps: Vec<StepProbFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DistributionFile {
    #[serde(default)]
    edges: Vec<EdgeMarginalFile>,
    #[serde(default)]
    starts: Vec<StartMarginalFile>,
}

/// A materialized list of distinct scenarios with integer weights over a
/// common denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSupport {
    entries: Vec<(Scenario, i128)>,
    denominator: i128,
    approximate: bool,
}

impl ScenarioSupport {
    pub fn single(scenario: Scenario) -> Self {
        Self { entries: vec![(scenario, 1)], denominator: 1, approximate: false }
    }

    pub fn entries(&self) -> &[(Scenario, i128)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn denominator(&self) -> i128 {
        self.denominator
    }

    /// True for sampled supports (empirical weights).
    pub fn is_approximate(&self) -> bool {
        self.approximate
    }

    pub fn probability(&self, k: usize) -> Ratio<i128> {
        Ratio::new(self.entries[k].1, self.denominator)
    }
}

/// A marginal as integer numerators over its least common denominator.
fn integer_weights<K: Copy>(list: &[(K, Probability)]) -> (Vec<(K, i128)>, i128) {
    let lcm = list.iter().fold(1i64, |acc, (_, p)| acc.lcm(p.denom()));
    let weights = list.iter().map(|(k, p)| (*k, i128::from(p.numer() * (lcm / p.denom())))).collect();
    (weights, i128::from(lcm))
}

enum Marginal {
    Edge(EdgeId, Vec<(ProfileId, i128)>),
    Start(VehicleId, Vec<(Step, i128)>),
}

impl Marginal {
    fn len(&self) -> usize {
        match self {
            Marginal::Edge(_, l) => l.len(),
            Marginal::Start(_, l) => l.len(),
        }
    }

    fn weight(&self, k: usize) -> i128 {
        match self {
            Marginal::Edge(_, l) => l[k].1,
            Marginal::Start(_, l) => l[k].1,
        }
    }

    fn apply(&self, k: usize, scenario: &mut Scenario) {
        match self {
            Marginal::Edge(e, l) => {
                scenario.profile_assignment.insert(*e, l[k].0);
            }
            Marginal::Start(v, l) => {
                scenario.start_steps.insert(*v, l[k].0);
            }
        }
    }
}

fn marginals(dist: &ScenarioDistribution) -> Result<(Vec<Marginal>, Vec<i128>, i128)> {
    let mut out = Vec::new();
    let mut lcms = Vec::new();
    let mut denominator: i128 = 1;
    for (e, list) in &dist.edges {
        let (w, l) = integer_weights(list);
        out.push(Marginal::Edge(*e, w));
        lcms.push(l);
        denominator = denominator.checked_mul(l).ok_or_else(|| invalid("probability denominators overflow"))?;
    }
    for (v, list) in &dist.starts {
        let (w, l) = integer_weights(list);
        out.push(Marginal::Start(*v, w));
        lcms.push(l);
        denominator = denominator.checked_mul(l).ok_or_else(|| invalid("probability denominators overflow"))?;
    }
    Ok((out, lcms, denominator))
}

/// Full Cartesian product of the marginals with product probabilities.
pub fn enumerate_support(dist: &ScenarioDistribution, cap: usize) -> Result<ScenarioSupport> {
    dist.validate()?;
    let size = dist.support_size();
    if size > cap as u128 {
        return Err(Error::SupportTooLarge { size, cap });
    }
    let (margs, _, denominator) = marginals(dist)?;
    let mut entries = Vec::with_capacity(size as usize);
    let mut idx = vec![0usize; margs.len()];
    loop {
        let mut scenario = Scenario::default();
        let mut weight: i128 = 1;
        for (m, &k) in margs.iter().zip(&idx) {
            m.apply(k, &mut scenario);
            weight *= m.weight(k);
        }
        entries.push((scenario, weight));
        // odometer, last marginal fastest
        let mut pos = margs.len();
        loop {
            if pos == 0 {
                return Ok(ScenarioSupport { entries, denominator, approximate: false });
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < margs[pos].len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Draws `sample_count` joint scenarios; duplicates are merged and weighted
/// by multiplicity.
pub fn sample_support(dist: &ScenarioDistribution, sample_count: usize, seed: u64) -> Result<ScenarioSupport> {
    if sample_count == 0 {
        return Err(invalid("sample_count must be at least 1"));
    }
    dist.validate()?;
    let (margs, lcms, _) = marginals(dist)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: BTreeMap<Scenario, i128> = BTreeMap::new();
    for _ in 0..sample_count {
        let mut scenario = Scenario::default();
        for (m, &lcm) in margs.iter().zip(&lcms) {
            let mut u = rng.gen_range(0..lcm);
            let mut pick = m.len() - 1;
            for k in 0..m.len() {
                if u < m.weight(k) {
                    pick = k;
                    break;
                }
                u -= m.weight(k);
            }
            m.apply(pick, &mut scenario);
        }
        *counts.entry(scenario).or_insert(0) += 1;
    }
    let entries: Vec<_> = counts.into_iter().collect();
    Ok(ScenarioSupport { entries, denominator: sample_count as i128, approximate: true })
}

/// `Σ_τ Pr(τ) · U^i(w, τ)` evaluated scenario by scenario.
pub fn expected_utility(
    network: &RoadNetwork,
    fleet: &Fleet,
    vehicle: VehicleId,
    profile: &ActionProfile,
    support: &ScenarioSupport,
    payoffs: &Payoffs,
) -> Result<Ratio<i128>> {
    let mut total = 0i128;
    for (scenario, weight) in &support.entries {
        total += weight * i128::from(utility(network, fleet, vehicle, profile, scenario, payoffs)?);
    }
    Ok(Ratio::new(total, support.denominator))
}

/// `Σ_τ Pr(τ) · Φ(w, τ)`.
pub fn expected_potential(
    network: &RoadNetwork,
    fleet: &Fleet,
    profile: &ActionProfile,
    support: &ScenarioSupport,
    payoffs: &Payoffs,
) -> Result<Ratio<i128>> {
    let mut total = 0i128;
    for (scenario, weight) in &support.entries {
        total += weight * i128::from(potential(network, fleet, profile, scenario, payoffs)?);
    }
    Ok(Ratio::new(total, support.denominator))
}

/// Expected-utility oracle over the exact support.
pub fn exact_utility_oracle<'a>(
    network: &'a RoadNetwork,
    fleet: &Fleet,
    dist: &ScenarioDistribution,
    payoffs: &Payoffs,
    cap: usize,
) -> Result<PlatoonGame<'a>> {
    PlatoonGame::stochastic(network, fleet, &enumerate_support(dist, cap)?, payoffs)
}

/// Monte Carlo oracle: one fixed sample drawn from `seed` and reused for
/// every evaluation, so the oracle is deterministic within a solve.
pub fn sampled_utility_oracle<'a>(
    network: &'a RoadNetwork,
    fleet: &Fleet,
    dist: &ScenarioDistribution,
    payoffs: &Payoffs,
    sample_count: usize,
    seed: u64,
) -> Result<PlatoonGame<'a>> {
    PlatoonGame::stochastic(network, fleet, &sample_support(dist, sample_count, seed)?, payoffs)
}
