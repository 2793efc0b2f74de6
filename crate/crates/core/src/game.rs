//! The deterministic platoon coordination game.
//!
//! Vehicles choose how long to wait at each node of a fixed path. Vehicles
//! entering the same edge at the same step form a platoon and each member
//! earns the platoon reward for that edge; waiting costs a fixed amount per
//! step. All money is integer centi-SEK (hundredths of SEK).
//!
//! The functions here are the plain reference evaluation. The solver uses
//! the incremental evaluator in [`crate::oracle`], which is checked against
//! these functions in tests.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::network::{AssignedTravelTimes, Edge, EdgeId, Path, ProfileId, RoadNetwork, Step, TravelTimes};

pub type VehicleId = u32;

pub const DEFAULT_WAITING_BUDGET: Step = 4;
pub const DEFAULT_C_B_CENTI: i64 = 170;
pub const DEFAULT_C_T_CENTI: i64 = 2200;

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSpec {
    pub id: VehicleId,
    pub path: Path,
    /// Step at which the vehicle arrives at its first node.
    pub start_step: Step,
    pub waiting_budget_steps: Step,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetEntry {
    pub id: VehicleId,
    pub edge_sequence: Vec<EdgeId>,
    pub start_step: Step,
    #[serde(default = "default_budget")]
    pub waiting_budget_steps: Step,
}

fn default_budget() -> Step {
    DEFAULT_WAITING_BUDGET
}

/// Vehicles sorted by ascending id. Player index `i` in every profile and
/// solver call refers to `vehicles()[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    vehicles: Vec<VehicleSpec>,
    index: HashMap<VehicleId, usize>,
}

impl Fleet {
    pub fn new(mut vehicles: Vec<VehicleSpec>) -> Result<Self> {
        vehicles.sort_by_key(|v| v.id);
        let mut index = HashMap::with_capacity(vehicles.len());
        for (i, v) in vehicles.iter().enumerate() {
            if index.insert(v.id, i).is_some() {
                return Err(invalid(format!("duplicate vehicle id {}", v.id)));
            }
        }
        Ok(Self { vehicles, index })
    }

    pub fn from_entries(network: &RoadNetwork, entries: &[FleetEntry]) -> Result<Self> {
        let vehicles = entries
            .iter()
            .map(|e| {
                Ok(VehicleSpec {
                    id: e.id,
                    path: network.path(&e.edge_sequence).map_err(|err| invalid(format!("vehicle {}: {err}", e.id)))?,
                    start_step: e.start_step,
                    waiting_budget_steps: e.waiting_budget_steps,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(vehicles)
    }

    pub fn load(network: &RoadNetwork, path: impl AsRef<FsPath>) -> Result<Self> {
        let entries: Vec<FleetEntry> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_entries(network, &entries)
    }

    pub fn entries(&self) -> Vec<FleetEntry> {
        self.vehicles
            .iter()
            .map(|v| FleetEntry {
                id: v.id,
                edge_sequence: v.path.edges().to_vec(),
                start_step: v.start_step,
                waiting_budget_steps: v.waiting_budget_steps,
            })
            .collect()
    }

    pub fn vehicles(&self) -> &[VehicleSpec] {
        &self.vehicles
    }

    pub fn len(&self) -> usize {
        self.vehicles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vehicles.is_empty()
    }

    pub fn position(&self, id: VehicleId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn get(&self, id: VehicleId) -> Option<&VehicleSpec> {
        self.position(id).map(|i| &self.vehicles[i])
    }
}

/// Waits at the non-destination nodes of a path, one entry per edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WaitingVector(pub Vec<Step>);

impl WaitingVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn total(&self) -> Step {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }
}

impl fmt::Display for WaitingVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, w) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{w}")?;
        }
        write!(f, ")")
    }
}

impl From<Vec<Step>> for WaitingVector {
    fn from(v: Vec<Step>) -> Self {
        Self(v)
    }
}

/// Joint action, positional over players.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActionProfile(pub Vec<WaitingVector>);

impl ActionProfile {
    pub fn zeros(fleet: &Fleet) -> Self {
        Self(fleet.vehicles.iter().map(|v| WaitingVector::zeros(v.path.len())).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, player: usize) -> &WaitingVector {
        &self.0[player]
    }

    pub fn set(&mut self, player: usize, waits: WaitingVector) {
        self.0[player] = waits;
    }

    /// Copy of this profile with one player's action replaced.
    pub fn with(&self, player: usize, waits: WaitingVector) -> Self {
        let mut next = self.clone();
        next.0[player] = waits;
        next
    }

    pub fn validate(&self, fleet: &Fleet) -> Result<()> {
        if self.0.len() != fleet.len() {
            return Err(invalid(format!("profile has {} entries for a fleet of {}", self.0.len(), fleet.len())));
        }
        for (v, w) in fleet.vehicles.iter().zip(&self.0) {
            if w.len() != v.path.len() {
                return Err(invalid(format!("vehicle {}: {} waits for a {}-edge path", v.id, w.len(), v.path.len())));
            }
            if w.total() > v.waiting_budget_steps {
                return Err(invalid(format!(
                    "vehicle {}: waits {} exceed the budget of {} steps",
                    v.id, w, v.waiting_budget_steps
                )));
            }
        }
        Ok(())
    }

    pub fn to_id_map(&self, fleet: &Fleet) -> BTreeMap<VehicleId, WaitingVector> {
        fleet.vehicles.iter().map(|v| v.id).zip(self.0.iter().cloned()).collect()
    }

    pub fn from_id_map(fleet: &Fleet, map: &BTreeMap<VehicleId, WaitingVector>) -> Result<Self> {
        let waits = fleet
            .vehicles
            .iter()
            .map(|v| map.get(&v.id).cloned().ok_or_else(|| invalid(format!("profile has no entry for vehicle {}", v.id))))
            .collect::<Result<Vec<_>>>()?;
        if map.len() != fleet.len() {
            return Err(invalid("profile names vehicles outside the fleet"));
        }
        let profile = Self(waits);
        profile.validate(fleet)?;
        Ok(profile)
    }
}

/// A realization of all travel times (through a delay profile per edge)
/// and of the start times.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub profile_assignment: BTreeMap<EdgeId, ProfileId>,
    /// Vehicles absent here start at their nominal `start_step`.
    #[serde(default)]
    pub start_steps: BTreeMap<VehicleId, Step>,
}

impl Scenario {
    pub fn new(profile_assignment: BTreeMap<EdgeId, ProfileId>, start_steps: BTreeMap<VehicleId, Step>) -> Self {
        Self { profile_assignment, start_steps }
    }

    pub fn start_of(&self, vehicle: &VehicleSpec) -> Step {
        self.start_steps.get(&vehicle.id).copied().unwrap_or(vehicle.start_step)
    }

    pub fn travel_times<'a>(&self, network: &'a RoadNetwork) -> Result<AssignedTravelTimes<'a>> {
        AssignedTravelTimes::new(network, &self.profile_assignment)
    }

    pub fn starts(&self, fleet: &Fleet) -> Vec<Step> {
        fleet.vehicles.iter().map(|v| self.start_of(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardModel {
    /// `R(n, e) = c_b · l(e) · (n − 1) / n`, rounded half away from zero.
    PerFollowerShare { c_b_centi: i64 },
    /// Explicit `R(n, e)` per `(platoon size, edge)`.
    CustomTable(BTreeMap<(u32, EdgeId), i64>),
}

impl Default for RewardModel {
    fn default() -> Self {
        RewardModel::PerFollowerShare { c_b_centi: DEFAULT_C_B_CENTI }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitingCostModel {
    pub c_t_centi: i64,
}

impl Default for WaitingCostModel {
    fn default() -> Self {
        Self { c_t_centi: DEFAULT_C_T_CENTI }
    }
}

impl WaitingCostModel {
    pub fn cost(&self, waits: &WaitingVector) -> i64 {
        self.c_t_centi * i64::from(waits.total())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Payoffs {
    pub reward: RewardModel,
    pub waiting_cost: WaitingCostModel,
}

impl Payoffs {
    pub fn new(c_b_centi: i64, c_t_centi: i64) -> Self {
        Self {
            reward: RewardModel::PerFollowerShare { c_b_centi },
            waiting_cost: WaitingCostModel { c_t_centi },
        }
    }
}

/// Rounds to nearest with ties away from zero.
pub fn round_half_away(x: f64) -> i64 {
    x.round() as i64
}

/// Per-member reward for a platoon of `platoon_size` on `edge`.
pub fn reward(model: &RewardModel, platoon_size: u32, edge: &Edge) -> Result<i64> {
    if platoon_size == 0 {
        return Err(invalid("platoon size must be at least 1"));
    }
    match model {
        RewardModel::PerFollowerShare { c_b_centi } => {
            let n = f64::from(platoon_size);
            Ok(round_half_away(*c_b_centi as f64 * edge.length_km * (n - 1.0) / n))
        }
        RewardModel::CustomTable(table) => table
            .get(&(platoon_size, edge.id))
            .copied()
            .ok_or_else(|| invalid(format!("no custom reward for a platoon of {platoon_size} on edge {}", edge.id))),
    }
}

/// `r(n, e) = Σ_{j=1..n} R(j, e)`, with `r(0, e) = 0`.
pub fn cumulative_reward(model: &RewardModel, n: u32, edge: &Edge) -> Result<i64> {
    (1..=n).map(|j| reward(model, j, edge)).sum()
}

/// Departure steps from each non-destination node of the path.
pub fn departure_times_with(
    edges: &[EdgeId],
    start: Step,
    waits: &WaitingVector,
    travel: &dyn TravelTimes,
) -> Vec<Step> {
    let mut out = Vec::with_capacity(edges.len());
    let mut d = start + waits.0[0];
    out.push(d);
    for k in 1..edges.len() {
        d = d + travel.travel_time(edges[k - 1], d) + waits.0[k];
        out.push(d);
    }
    out
}

pub fn departure_times(
    network: &RoadNetwork,
    vehicle: &VehicleSpec,
    waits: &WaitingVector,
    scenario: &Scenario,
) -> Result<Vec<Step>> {
    if waits.len() != vehicle.path.len() {
        return Err(invalid(format!("vehicle {}: {} waits for a {}-edge path", vehicle.id, waits.len(), vehicle.path.len())));
    }
    let travel = scenario.travel_times(network)?;
    Ok(departure_times_with(vehicle.path.edges(), scenario.start_of(vehicle), waits, &travel))
}

pub type PlatoonSets = BTreeMap<(EdgeId, Step), BTreeSet<VehicleId>>;

/// Vehicles entering each edge at each step.
pub fn platoon_sets(
    network: &RoadNetwork,
    fleet: &Fleet,
    profile: &ActionProfile,
    scenario: &Scenario,
) -> Result<PlatoonSets> {
    profile.validate(fleet)?;
    let travel = scenario.travel_times(network)?;
    Ok(platoon_sets_with(fleet, profile, &travel, &scenario.starts(fleet)))
}

pub fn platoon_sets_with(fleet: &Fleet, profile: &ActionProfile, travel: &dyn TravelTimes, starts: &[Step]) -> PlatoonSets {
    let mut sets = PlatoonSets::new();
    for ((v, w), &start) in fleet.vehicles.iter().zip(&profile.0).zip(starts) {
        let departures = departure_times_with(v.path.edges(), start, w, travel);
        for (&e, d) in v.path.edges().iter().zip(departures) {
            sets.entry((e, d)).or_default().insert(v.id);
        }
    }
    sets
}

fn edge_of(network: &RoadNetwork, id: EdgeId) -> Result<&Edge> {
    network.edge(id).ok_or_else(|| invalid(format!("unknown edge {id}")))
}

/// Platooning rewards along the vehicle's path minus its waiting cost.
pub fn utility(
    network: &RoadNetwork,
    fleet: &Fleet,
    vehicle: VehicleId,
    profile: &ActionProfile,
    scenario: &Scenario,
    payoffs: &Payoffs,
) -> Result<i64> {
    let sets = platoon_sets(network, fleet, profile, scenario)?;
    utility_from_sets(network, fleet, vehicle, profile, &sets, payoffs)
}

pub(crate) fn utility_from_sets(
    network: &RoadNetwork,
    fleet: &Fleet,
    vehicle: VehicleId,
    profile: &ActionProfile,
    sets: &PlatoonSets,
    payoffs: &Payoffs,
) -> Result<i64> {
    let i = fleet.position(vehicle).ok_or_else(|| invalid(format!("vehicle {vehicle} is not in the fleet")))?;
    let mut total = 0;
    for ((e, _), members) in sets {
        if members.contains(&vehicle) {
            total += reward(&payoffs.reward, members.len() as u32, edge_of(network, *e)?)?;
        }
    }
    Ok(total - payoffs.waiting_cost.cost(profile.get(i)))
}

/// `Σ_{(e,t)} r(|C(e,t)|, e) − Σ_i Λ_i(w^i)`, summed over occupied keys.
pub fn potential(
    network: &RoadNetwork,
    fleet: &Fleet,
    profile: &ActionProfile,
    scenario: &Scenario,
    payoffs: &Payoffs,
) -> Result<i64> {
    let sets = platoon_sets(network, fleet, profile, scenario)?;
    potential_from_sets(network, profile, &sets, payoffs)
}

pub(crate) fn potential_from_sets(
    network: &RoadNetwork,
    profile: &ActionProfile,
    sets: &PlatoonSets,
    payoffs: &Payoffs,
) -> Result<i64> {
    let mut total = 0;
    for ((e, _), members) in sets {
        total += cumulative_reward(&payoffs.reward, members.len() as u32, edge_of(network, *e)?)?;
    }
    let costs: i64 = profile.0.iter().map(|w| payoffs.waiting_cost.cost(w)).sum();
    Ok(total - costs)
}
