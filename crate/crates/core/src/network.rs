//! Hub graph, vehicle paths and time-varying travel times.
//!
//! Time is a global integer grid of `time_step_minutes`-long steps. The
//! travel time of an edge entered at step `t` is its off-peak base time
//! plus a nonnegative delay taken from the delay profile assigned to the
//! edge. Profiles are sparse: an absent `(edge, t)` entry means no delay.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub type HubId = u32;
pub type EdgeId = u32;
pub type ProfileId = u32;
/// A point or duration on the global time grid.
pub type Step = u32;

pub const DEFAULT_TIME_STEP_MINUTES: u32 = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hub {
    pub id: HubId,
    pub name: String,
    /// Relative weight used when sampling origins and destinations.
    pub population_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub id: EdgeId,
    pub tail: HubId,
    pub head: HubId,
    pub length_km: f64,
    /// Off-peak travel time in steps.
    pub base_travel_steps: Step,
    #[serde(default)]
    pub delay_profile_ids: Vec<ProfileId>,
}

/// One day's worth of peak delays, keyed by `(edge, entry step)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DelayProfile {
    pub id: ProfileId,
    delays: HashMap<(EdgeId, Step), Step>,
}

impl DelayProfile {
    pub fn new(id: ProfileId) -> Self {
        Self { id, delays: HashMap::new() }
    }

    pub fn with_entries(id: ProfileId, entries: impl IntoIterator<Item = (EdgeId, Step, Step)>) -> Self {
        let mut profile = Self::new(id);
        for (edge, t, delta) in entries {
            profile.set(edge, t, delta);
        }
        profile
    }

    /// Zero deltas are not stored.
    pub fn set(&mut self, edge: EdgeId, t: Step, delta: Step) {
        if delta == 0 {
            self.delays.remove(&(edge, t));
        } else {
            self.delays.insert((edge, t), delta);
        }
    }

    #[inline]
    pub fn delay(&self, edge: EdgeId, t: Step) -> Step {
        self.delays.get(&(edge, t)).copied().unwrap_or(0)
    }

    /// Nonzero entries sorted by `(edge, t)`.
    pub fn entries(&self) -> Vec<(EdgeId, Step, Step)> {
        let mut out: Vec<_> = self.delays.iter().map(|(&(e, t), &d)| (e, t, d)).collect();
        out.sort_unstable();
        out
    }

    pub fn is_empty(&self) -> bool {
        self.delays.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DelayEntryFile {
    edge: EdgeId,
    t: Step,
    delta: Step,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DelayProfileFile {
    id: ProfileId,
    #[serde(default)]
    entries: Vec<DelayEntryFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    #[serde(default = "default_step_minutes")]
    time_step_minutes: u32,
    hubs: Vec<Hub>,
    edges: Vec<Edge>,
    #[serde(default)]
    delay_profiles: Vec<DelayProfileFile>,
}

fn default_step_minutes() -> u32 {
    DEFAULT_TIME_STEP_MINUTES
}

/// Directed road graph. Indexes are built on construction and tolerate
/// invalid input (first occurrence of a duplicate id wins) so that
/// [`RoadNetwork::validate`] can report every problem at once.
#[derive(Debug, Clone)]
pub struct RoadNetwork {
    time_step_minutes: u32,
    hubs: Vec<Hub>,
    edges: Vec<Edge>,
    profiles: Vec<DelayProfile>,
    hub_index: HashMap<HubId, usize>,
    edge_index: HashMap<EdgeId, usize>,
    profile_index: HashMap<ProfileId, usize>,
    adjacency: BTreeMap<HubId, Vec<EdgeId>>,
}

impl RoadNetwork {
    pub fn new(time_step_minutes: u32, hubs: Vec<Hub>, edges: Vec<Edge>, profiles: Vec<DelayProfile>) -> Self {
        let mut hub_index = HashMap::new();
        for (i, h) in hubs.iter().enumerate() {
            hub_index.entry(h.id).or_insert(i);
        }
        let mut edge_index = HashMap::new();
        let mut adjacency: BTreeMap<HubId, Vec<EdgeId>> = BTreeMap::new();
        for (i, e) in edges.iter().enumerate() {
            if let std::collections::hash_map::Entry::Vacant(slot) = edge_index.entry(e.id) {
                slot.insert(i);
                adjacency.entry(e.tail).or_default().push(e.id);
            }
        }
        let mut profile_index = HashMap::new();
        for (i, p) in profiles.iter().enumerate() {
            profile_index.entry(p.id).or_insert(i);
        }
        Self { time_step_minutes, hubs, edges, profiles, hub_index, edge_index, profile_index, adjacency }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: NetworkFile = serde_json::from_str(s)?;
        let profiles = raw
            .delay_profiles
            .into_iter()
            .map(|p| DelayProfile::with_entries(p.id, p.entries.into_iter().map(|e| (e.edge, e.t, e.delta))))
            .collect();
        Ok(Self::new(raw.time_step_minutes, raw.hubs, raw.edges, profiles))
    }

    pub fn load(path: impl AsRef<FsPath>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Loads a network and rejects it if any invariant is violated.
    pub fn load_validated(path: impl AsRef<FsPath>) -> Result<Self> {
        let net = Self::load(path)?;
        net.ensure_valid()?;
        Ok(net)
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = self.validate();
        if violations.is_empty() {
            Ok(())
        } else {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Err(invalid(format!("network is invalid: {}", list.join("; "))))
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = NetworkFile {
            time_step_minutes: self.time_step_minutes,
            hubs: self.hubs.clone(),
            edges: self.edges.clone(),
            delay_profiles: self
                .profiles
                .iter()
                .map(|p| DelayProfileFile {
                    id: p.id,
                    entries: p.entries().into_iter().map(|(edge, t, delta)| DelayEntryFile { edge, t, delta }).collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn time_step_minutes(&self) -> u32 {
        self.time_step_minutes
    }

    pub fn hubs(&self) -> &[Hub] {
        &self.hubs
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn delay_profiles(&self) -> &[DelayProfile] {
        &self.profiles
    }

    pub fn hub(&self, id: HubId) -> Option<&Hub> {
        self.hub_index.get(&id).map(|&i| &self.hubs[i])
    }

    pub fn edge(&self, id: EdgeId) -> Option<&Edge> {
        self.edge_index.get(&id).map(|&i| &self.edges[i])
    }

    pub fn profile(&self, id: ProfileId) -> Option<&DelayProfile> {
        self.profile_index.get(&id).map(|&i| &self.profiles[i])
    }

    pub fn outgoing(&self, hub: HubId) -> &[EdgeId] {
        self.adjacency.get(&hub).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Replaces the delay profiles and makes every edge admit all of them.
    pub fn with_uniform_profiles(mut self, profiles: Vec<DelayProfile>) -> Self {
        let ids: Vec<ProfileId> = profiles.iter().map(|p| p.id).collect();
        for e in &mut self.edges {
            e.delay_profile_ids = ids.clone();
        }
        Self::new(self.time_step_minutes, self.hubs, self.edges, profiles)
    }

    /// Returns every violated invariant; empty iff the network is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        validate_network(self)
    }

    /// Builds a path from an edge sequence, checking that consecutive
    /// edges are connected.
    pub fn path(&self, edge_sequence: &[EdgeId]) -> Result<Path> {
        if edge_sequence.is_empty() {
            return Err(invalid("a path needs at least one edge"));
        }
        let mut nodes = Vec::with_capacity(edge_sequence.len() + 1);
        for (k, &id) in edge_sequence.iter().enumerate() {
            let e = self.edge(id).ok_or_else(|| invalid(format!("unknown edge {id} in path")))?;
            if k == 0 {
                nodes.push(e.tail);
            } else if *nodes.last().unwrap() != e.tail {
                return Err(invalid(format!(
                    "edge {id} starts at hub {} but the previous edge ends at hub {}",
                    e.tail,
                    nodes.last().unwrap()
                )));
            }
            nodes.push(e.head);
        }
        Ok(Path { edges: edge_sequence.to_vec(), nodes })
    }

    pub fn path_length_km(&self, path: &Path) -> f64 {
        path.edges.iter().filter_map(|&e| self.edge(e)).map(|e| e.length_km).sum()
    }

    pub fn free_flow(&self) -> FreeFlow<'_> {
        FreeFlow { network: self }
    }
}

/// Ordered edge sequence with its derived node sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Path {
    edges: Vec<EdgeId>,
    nodes: Vec<HubId>,
}

impl Path {
    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    pub fn nodes(&self) -> &[HubId] {
        &self.nodes
    }

    /// Number of edges.
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn origin(&self) -> HubId {
        self.nodes[0]
    }

    pub fn destination(&self) -> HubId {
        *self.nodes.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ZeroTimeStep,
    DuplicateHub(HubId),
    NegativePopulation(HubId),
    DuplicateEdge(EdgeId),
    DanglingEndpoint { edge: EdgeId, hub: HubId },
    SelfLoop(EdgeId),
    NonPositiveLength(EdgeId),
    ZeroBaseTravel(EdgeId),
    UnknownProfile { edge: EdgeId, profile: ProfileId },
    DuplicateProfile(ProfileId),
    ProfileUnknownEdge { profile: ProfileId, edge: EdgeId },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroTimeStep => write!(f, "time_step_minutes must be positive"),
            Violation::DuplicateHub(id) => write!(f, "duplicate hub id {id}"),
            Violation::NegativePopulation(id) => {
                write!(f, "hub {id} has a negative or non-finite population_weight")
            }
            Violation::DuplicateEdge(id) => write!(f, "duplicate edge id {id}"),
            Violation::DanglingEndpoint { edge, hub } => {
                write!(f, "edge {edge} references missing hub {hub}")
            }
            Violation::SelfLoop(id) => write!(f, "edge {id} has identical tail and head"),
            Violation::NonPositiveLength(id) => write!(f, "edge {id} has a nonpositive length_km"),
            Violation::ZeroBaseTravel(id) => write!(f, "edge {id} has base_travel_steps = 0"),
            Violation::UnknownProfile { edge, profile } => {
                write!(f, "edge {edge} admits missing delay profile {profile}")
            }
            Violation::DuplicateProfile(id) => write!(f, "duplicate delay profile id {id}"),
            Violation::ProfileUnknownEdge { profile, edge } => {
                write!(f, "delay profile {profile} has an entry for missing edge {edge}")
            }
        }
    }
}

pub fn validate_network(network: &RoadNetwork) -> Vec<Violation> {
    let mut out = Vec::new();
    if network.time_step_minutes == 0 {
        out.push(Violation::ZeroTimeStep);
    }
    let mut seen = HashSet::new();
    for h in &network.hubs {
        if !seen.insert(h.id) {
            out.push(Violation::DuplicateHub(h.id));
        }
        if !(h.population_weight.is_finite() && h.population_weight >= 0.0) {
            out.push(Violation::NegativePopulation(h.id));
        }
    }
    let mut seen = HashSet::new();
    for e in &network.edges {
        if !seen.insert(e.id) {
            out.push(Violation::DuplicateEdge(e.id));
        }
        for hub in [e.tail, e.head] {
            if network.hub(hub).is_none() {
                out.push(Violation::DanglingEndpoint { edge: e.id, hub });
            }
        }
        if e.tail == e.head {
            out.push(Violation::SelfLoop(e.id));
        }
        if !(e.length_km.is_finite() && e.length_km > 0.0) {
            out.push(Violation::NonPositiveLength(e.id));
        }
        if e.base_travel_steps == 0 {
            out.push(Violation::ZeroBaseTravel(e.id));
        }
        for &p in &e.delay_profile_ids {
            if network.profile(p).is_none() {
                out.push(Violation::UnknownProfile { edge: e.id, profile: p });
            }
        }
    }
    let mut seen = HashSet::new();
    for p in &network.profiles {
        if !seen.insert(p.id) {
            out.push(Violation::DuplicateProfile(p.id));
        }
        let mut missing: Vec<EdgeId> =
            p.delays.keys().map(|&(e, _)| e).filter(|e| network.edge(*e).is_none()).collect();
        missing.sort_unstable();
        missing.dedup();
        out.extend(missing.into_iter().map(|edge| Violation::ProfileUnknownEdge { profile: p.id, edge }));
    }
    out
}

/// Source of edge travel times on the global grid.
pub trait TravelTimes {
    /// Steps needed to traverse `edge` when entering at `entry`; always ≥ 1.
    fn travel_time(&self, edge: EdgeId, entry: Step) -> Step;
}

/// Off-peak travel times (no delays).
#[derive(Debug, Clone, Copy)]
pub struct FreeFlow<'a> {
    network: &'a RoadNetwork,
}

impl TravelTimes for FreeFlow<'_> {
    fn travel_time(&self, edge: EdgeId, _entry: Step) -> Step {
        self.network.edge(edge).map(|e| e.base_travel_steps).unwrap_or(1)
    }
}

/// Travel times under a fixed assignment of one delay profile per edge.
#[derive(Debug, Clone)]
pub struct AssignedTravelTimes<'a> {
    edges: HashMap<EdgeId, (Step, Option<&'a DelayProfile>)>,
}

impl<'a> AssignedTravelTimes<'a> {
    /// Edges without admissible profiles run at base time; every other
    /// edge must be assigned one of its admissible profiles.
    pub fn new(network: &'a RoadNetwork, assignment: &BTreeMap<EdgeId, ProfileId>) -> Result<Self> {
        for &edge in assignment.keys() {
            if network.edge(edge).is_none() {
                return Err(invalid(format!("profile assignment names unknown edge {edge}")));
            }
        }
        let mut edges = HashMap::with_capacity(network.edges.len());
        for e in &network.edges {
            let profile = match assignment.get(&e.id) {
                Some(&p) => Some(resolve_profile(network, e, p)?),
                None if e.delay_profile_ids.is_empty() => None,
                None => return Err(invalid(format!("no delay profile assigned to edge {}", e.id))),
            };
            edges.insert(e.id, (e.base_travel_steps, profile));
        }
        Ok(Self { edges })
    }
}

impl TravelTimes for AssignedTravelTimes<'_> {
    #[inline]
    fn travel_time(&self, edge: EdgeId, entry: Step) -> Step {
        match self.edges.get(&edge) {
            Some(&(base, Some(p))) => base + p.delay(edge, entry),
            Some(&(base, None)) => base,
            None => 1,
        }
    }
}

fn resolve_profile<'a>(network: &'a RoadNetwork, edge: &Edge, profile: ProfileId) -> Result<&'a DelayProfile> {
    if !edge.delay_profile_ids.contains(&profile) {
        return Err(invalid(format!("delay profile {profile} is not admissible on edge {}", edge.id)));
    }
    network.profile(profile).ok_or_else(|| invalid(format!("unknown delay profile {profile}")))
}

/// Base travel time plus the delay of the assigned profile at `entry_step`.
pub fn travel_time(
    network: &RoadNetwork,
    edge: EdgeId,
    entry_step: Step,
    profile_assignment: &BTreeMap<EdgeId, ProfileId>,
) -> Result<Step> {
    let e = network.edge(edge).ok_or_else(|| invalid(format!("unknown edge {edge}")))?;
    match profile_assignment.get(&edge) {
        Some(&p) => Ok(e.base_travel_steps + resolve_profile(network, e, p)?.delay(edge, entry_step)),
        None if e.delay_profile_ids.is_empty() => Ok(e.base_travel_steps),
        None => Err(invalid(format!("no delay profile assigned to edge {edge}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier {
    cost: f64,
    hub: HubId,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.hub.cmp(&self.hub))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-length path by Dijkstra; `None` if unreachable. Ties are broken
/// towards lower edge ids so results are deterministic.
pub fn shortest_path(network: &RoadNetwork, origin: HubId, destination: HubId) -> Option<(f64, Vec<EdgeId>)> {
    network.hub(origin)?;
    network.hub(destination)?;
    let mut dist: HashMap<HubId, f64> = HashMap::new();
    let mut via: HashMap<HubId, EdgeId> = HashMap::new();
    let mut heap = BinaryHeap::new();
    dist.insert(origin, 0.0);
    heap.push(Frontier { cost: 0.0, hub: origin });
    while let Some(Frontier { cost, hub }) = heap.pop() {
        if hub == destination {
            break;
        }
        if cost > dist[&hub] {
            continue;
        }
        let mut out: Vec<EdgeId> = network.outgoing(hub).to_vec();
        out.sort_unstable();
        for id in out {
            let e = network.edge(id).expect("adjacency references known edges");
            let next = cost + e.length_km;
            if dist.get(&e.head).is_none_or(|&d| next < d) {
                dist.insert(e.head, next);
                via.insert(e.head, id);
                heap.push(Frontier { cost: next, hub: e.head });
            }
        }
    }
    let total = *dist.get(&destination)?;
    let mut edges = Vec::new();
    let mut at = destination;
    while at != origin {
        let e = via[&at];
        edges.push(e);
        at = network.edge(e).unwrap().tail;
    }
    edges.reverse();
    Some((total, edges))
}

/// Length in km of a shortest directed path, or `None` when unreachable.
pub fn shortest_path_km(network: &RoadNetwork, origin: HubId, destination: HubId) -> Option<f64> {
    shortest_path(network, origin, destination).map(|(d, _)| d)
}

/// Single-source distances to every reachable hub.
pub fn distances_from(network: &RoadNetwork, origin: HubId) -> BTreeMap<HubId, f64> {
    let mut dist: HashMap<HubId, f64> = HashMap::new();
    let mut heap = BinaryHeap::new();
    dist.insert(origin, 0.0);
    heap.push(Frontier { cost: 0.0, hub: origin });
    while let Some(Frontier { cost, hub }) = heap.pop() {
        if cost > dist[&hub] {
            continue;
        }
        for &id in network.outgoing(hub) {
            let e = network.edge(id).unwrap();
            let next = cost + e.length_km;
            if dist.get(&e.head).is_none_or(|&d| next < d) {
                dist.insert(e.head, next);
                heap.push(Frontier { cost: next, hub: e.head });
            }
        }
    }
    dist.into_iter().collect()
}
