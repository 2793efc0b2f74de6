//! Closed-loop execution under stochastic travel times.
//!
//! Time advances on the global step grid. Within one step the world first
//! processes starts and arrivals, then the policy decides, then every
//! vehicle at a node either waits one step or enters its next edge.
//! Vehicles entering the same edge in the same step form a platoon.
//!
//! Open-loop policies (SP, IP, KTT) fix every waiting time before the first
//! step. The receding-horizon policies (DRHS, SRHS) re-solve a horizon game
//! at every decision instance, using only what the history reveals about
//! the ground-truth scenario.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, Error, Result};
use crate::game::{departure_times_with, reward, ActionProfile, Fleet, Payoffs, Scenario, VehicleId, WaitingVector};
use crate::network::{DelayProfile, EdgeId, HubId, ProfileId, RoadNetwork, Step, TravelTimes};
use crate::oracle::{PlatoonGame, Realization, Trip};
use crate::solver::{nash_seek, ActionSpace, SolveOptions, DEFAULT_ROUND_CAP};
use crate::stochastic::{enumerate_support, sample_support, ScenarioDistribution, ScenarioSupport, DEFAULT_SUPPORT_CAP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PolicyKind {
    #[serde(rename = "SP")]
    Sp,
    #[serde(rename = "IP")]
    Ip,
    #[serde(rename = "KTT")]
    Ktt,
    #[serde(rename = "DRHS")]
    Drhs,
    #[serde(rename = "SRHS")]
    Srhs,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [PolicyKind::Sp, PolicyKind::Ip, PolicyKind::Drhs, PolicyKind::Srhs, PolicyKind::Ktt];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Sp => "SP",
            PolicyKind::Ip => "IP",
            PolicyKind::Ktt => "KTT",
            PolicyKind::Drhs => "DRHS",
            PolicyKind::Srhs => "SRHS",
        }
    }

    pub fn is_receding(self) -> bool {
        matches!(self, PolicyKind::Drhs | PolicyKind::Srhs)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| invalid(format!("unknown policy {s:?} (expected SP, IP, KTT, DRHS or SRHS)")))
    }
}

/// Knobs shared by all policies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// Nodes ahead covered by a horizon game.
    pub horizon: usize,
    /// Vehicles on edges re-decide only if they would reach their next node
    /// within this many minutes at free-flow speed.
    pub gating_minutes: u32,
    /// Largest joint support enumerated exactly.
    pub support_cap: usize,
    /// Scenarios sampled for an SRHS horizon game above the cap.
    pub srhs_samples: usize,
    /// Scenarios sampled for the IP open-loop game above the cap.
    pub ip_samples: usize,
    pub round_cap: usize,
    /// The simulation fails once the clock passes this step.
    pub max_steps: Step,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            horizon: 2,
            gating_minutes: 20,
            support_cap: DEFAULT_SUPPORT_CAP,
            srhs_samples: 64,
            ip_samples: 32,
            round_cap: DEFAULT_ROUND_CAP,
            max_steps: 2000,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(invalid("horizon must be at least 1"));
        }
        if self.srhs_samples == 0 || self.ip_samples == 0 {
            return Err(invalid("sample counts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    #[serde(default)]
    pub config: PolicyConfig,
}

impl Policy {
    pub fn new(kind: PolicyKind) -> Self {
        Self { kind, config: PolicyConfig::default() }
    }

    pub fn with_config(kind: PolicyKind, config: PolicyConfig) -> Self {
        Self { kind, config }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    /// Not yet injected.
    Pending,
    /// At node `k` of the path, before traversing edge `k`.
    AtNode { k: usize },
    /// On edge `k`, entered at `entered`, `remaining_steps ≥ 1` to go.
    /// `remaining_steps` comes from the ground truth; policies must not read it.
    OnEdge { k: usize, entered: Step, remaining_steps: Step },
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VehicleState {
    pub location: Location,
    pub remaining_budget_steps: Step,
    pub waited_steps: Step,
    /// Committed waits by path node index.
    pub committed_waits: BTreeMap<usize, Step>,
    /// Accrued rewards minus waiting costs.
    pub realized_utility: i64,
    traversal: Option<usize>,
}

impl VehicleState {
    pub fn is_active(&self) -> bool {
        matches!(self.location, Location::AtNode { .. } | Location::OnEdge { .. })
    }
}

/// One observed edge traversal; `travel` is known once the vehicle arrived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Traversal {
    pub vehicle: VehicleId,
    pub edge: EdgeId,
    pub entered: Step,
    pub travel: Option<Step>,
}

/// The simulated world. The ground truth is private; policies see it only
/// through `history`.
#[derive(Debug, Clone)]
pub struct WorldState {
    pub t: Step,
    /// In fleet order.
    pub vehicles: Vec<VehicleState>,
    pub history: Vec<Traversal>,
    truth: Scenario,
    starts: Vec<Step>,
}

impl WorldState {
    pub fn new(fleet: &Fleet, truth: Scenario) -> Self {
        let starts = truth.starts(fleet);
        let t = starts.iter().copied().min().unwrap_or(0);
        let vehicles = fleet
            .vehicles()
            .iter()
            .map(|v| VehicleState {
                location: Location::Pending,
                remaining_budget_steps: v.waiting_budget_steps,
                waited_steps: 0,
                committed_waits: BTreeMap::new(),
                realized_utility: 0,
                traversal: None,
            })
            .collect();
        Self { t, vehicles, history: Vec::new(), truth, starts }
    }

    pub fn all_done(&self) -> bool {
        self.vehicles.iter().all(|v| v.location == Location::Done)
    }

    /// Known injection step of a vehicle (starts are deterministic unless a
    /// distribution says otherwise, and then only the realized one is used).
    pub fn start_step(&self, index: usize) -> Step {
        self.starts[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Start,
    Arrive,
    Decide,
    Wait,
    Depart,
    Platoon,
    Finish,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub t: Step,
    pub kind: EventKind,
    pub vehicles: Vec<VehicleId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge: Option<EdgeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<HubId>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub data: serde_json::Value,
}

impl Event {
    fn new(t: Step, kind: EventKind, vehicles: Vec<VehicleId>) -> Self {
        Self { t, kind, vehicles, edge: None, node: None, data: serde_json::Value::Null }
    }

    fn edge(mut self, edge: EdgeId) -> Self {
        self.edge = Some(edge);
        self
    }

    fn node(mut self, node: HubId) -> Self {
        self.node = Some(node);
        self
    }

    fn data(mut self, data: serde_json::Value) -> Self {
        self.data = data;
        self
    }
}

/// A platoon of two or more vehicles entering `edge` at `t`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PlatoonRecord {
    pub t: Step,
    pub edge: EdgeId,
    pub members: Vec<VehicleId>,
    pub arrive: Step,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationTrace {
    pub policy: PolicyKind,
    pub events: Vec<Event>,
    pub utilities: BTreeMap<VehicleId, i64>,
    pub waited_steps: BTreeMap<VehicleId, Step>,
    pub end_step: Step,
}

impl SimulationTrace {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_json_lines(policy: PolicyKind, text: &str) -> Result<Self> {
        let events = text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<Vec<Event>, _>>()?;
        let mut utilities = BTreeMap::new();
        let mut waited_steps = BTreeMap::new();
        for e in events.iter().filter(|e| e.kind == EventKind::Finish) {
            let v = e.vehicles[0];
            utilities.insert(v, e.data["utility"].as_i64().unwrap_or(0));
            waited_steps.insert(v, e.data["waited"].as_u64().unwrap_or(0) as Step);
        }
        let end_step = events.last().map_or(0, |e| e.t);
        Ok(Self { policy, events, utilities, waited_steps, end_step })
    }

    pub fn platoons(&self) -> Vec<PlatoonRecord> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Platoon)
            .map(|e| PlatoonRecord {
                t: e.t,
                edge: e.edge.unwrap_or_default(),
                members: e.vehicles.clone(),
                arrive: e.data["arrive"].as_u64().unwrap_or(u64::from(e.t)) as Step,
            })
            .collect()
    }

    pub fn platoon_set(&self) -> BTreeSet<(Step, EdgeId, Vec<VehicleId>)> {
        self.platoons().into_iter().map(|p| (p.t, p.edge, p.members)).collect()
    }

    /// `(t, vehicle, edge)` for every edge entry.
    pub fn departures(&self) -> Vec<(Step, VehicleId, EdgeId)> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Depart)
            .map(|e| (e.t, e.vehicles[0], e.edge.unwrap_or_default()))
            .collect()
    }

    pub fn total_utility(&self) -> i64 {
        self.utilities.values().sum()
    }

    /// Per-vehicle utility rebuilt from depart and wait events alone.
    pub fn recompute_utilities(&self, network: &RoadNetwork, payoffs: &Payoffs) -> Result<BTreeMap<VehicleId, i64>> {
        let mut groups: BTreeMap<(EdgeId, Step), Vec<VehicleId>> = BTreeMap::new();
        let mut out: BTreeMap<VehicleId, i64> = self.utilities.keys().map(|&v| (v, 0)).collect();
        for (t, v, e) in self.departures() {
            groups.entry((e, t)).or_default().push(v);
        }
        for ((e, _), members) in groups {
            let edge = network.edge(e).ok_or_else(|| invalid(format!("trace names unknown edge {e}")))?;
            let r = reward(&payoffs.reward, members.len() as u32, edge)?;
            for v in members {
                *out.entry(v).or_insert(0) += r;
            }
        }
        for e in self.events.iter().filter(|e| e.kind == EventKind::Wait) {
            *out.entry(e.vehicles[0]).or_insert(0) -= payoffs.waiting_cost.c_t_centi;
        }
        Ok(out)
    }

    /// Structural checks: time order, departures after a start or an
    /// arrival, and every vehicle's path traversed in order.
    pub fn check(&self, fleet: &Fleet) -> Result<()> {
        if self.events.windows(2).any(|w| w[0].t > w[1].t) {
            return Err(Error::Invariant("trace events are not time ordered".into()));
        }
        let mut progress: HashMap<VehicleId, (bool, usize)> = HashMap::new();
        for e in &self.events {
            match e.kind {
                EventKind::Start | EventKind::Arrive => {
                    progress.entry(e.vehicles[0]).or_insert((false, 0)).0 = true;
                }
                EventKind::Depart => {
                    let v = e.vehicles[0];
                    let (present, k) = progress.entry(v).or_insert((false, 0));
                    let spec = fleet.get(v).ok_or_else(|| Error::Invariant(format!("unknown vehicle {v} in trace")))?;
                    if !*present || spec.path.edges().get(*k) != e.edge.as_ref() {
                        return Err(Error::Invariant(format!("vehicle {v} departs out of order at {}", e.t)));
                    }
                    *present = false;
                    *k += 1;
                }
                _ => {}
            }
        }
        for v in fleet.vehicles() {
            if progress.get(&v.id).map(|p| p.1) != Some(v.path.len()) {
                return Err(Error::Invariant(format!("vehicle {} did not traverse its whole path", v.id)));
            }
        }
        Ok(())
    }
}

/// Horizon waits chosen for one vehicle, starting at path node `first_node`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub vehicle: VehicleId,
    pub first_node: usize,
    pub waits: WaitingVector,
}

/// Everything a policy may consult besides the world.
pub struct SimContext<'a> {
    pub network: &'a RoadNetwork,
    pub fleet: &'a Fleet,
    /// Prior over delay profiles, covering every edge with profiles.
    pub prior: ScenarioDistribution,
    pub payoffs: Payoffs,
    pub policy: Policy,
    pub seed: u64,
    max_delay: HashMap<EdgeId, Step>,
}

impl<'a> SimContext<'a> {
    pub fn new(
        network: &'a RoadNetwork,
        fleet: &'a Fleet,
        dist: &ScenarioDistribution,
        payoffs: &Payoffs,
        policy: &Policy,
        seed: u64,
    ) -> Result<Self> {
        policy.config.validate()?;
        let prior = dist.clone().completed(network);
        prior.validate_against(network, Some(fleet))?;
        let mut max_delay: HashMap<EdgeId, Step> = HashMap::new();
        for p in network.delay_profiles() {
            for (e, _, d) in p.entries() {
                let m = max_delay.entry(e).or_insert(0);
                *m = (*m).max(d);
            }
        }
        Ok(Self { network, fleet, prior, payoffs: payoffs.clone(), policy: policy.clone(), seed, max_delay })
    }

    fn gating_steps(&self) -> Step {
        self.policy.config.gating_minutes / self.network.time_step_minutes().max(1)
    }

    fn base(&self, edge: EdgeId) -> Step {
        self.network.edge(edge).map_or(1, |e| e.base_travel_steps)
    }

    fn max_travel(&self, edge: EdgeId) -> Step {
        self.base(edge) + self.max_delay.get(&edge).copied().unwrap_or(0)
    }

    fn profile(&self, id: ProfileId) -> &'a DelayProfile {
        self.network.profile(id).expect("validated profile ids resolve")
    }

    fn travel_under(&self, edge: EdgeId, profile: Option<ProfileId>, entry: Step) -> Step {
        self.base(edge) + profile.map_or(0, |p| self.profile(p).delay(edge, entry))
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions { round_cap: self.policy.config.round_cap, ..SolveOptions::default() }
    }
}

/// Vehicles that re-decide now: empty unless some active vehicle sits at a
/// node; then every vehicle at a node, every vehicle on an edge that would
/// reach its next node within the gating window at free-flow speed, and
/// every not-yet-injected vehicle starting within the window. Vehicles with
/// no node left to wait at are never eligible.
pub fn detect_decision_instance(ctx: &SimContext<'_>, world: &WorldState) -> Vec<VehicleId> {
    if !world.vehicles.iter().any(|v| matches!(v.location, Location::AtNode { .. })) {
        return Vec::new();
    }
    let gate = ctx.gating_steps();
    let mut out = Vec::new();
    for (i, (spec, v)) in ctx.fleet.vehicles().iter().zip(&world.vehicles).enumerate() {
        let eligible = match v.location {
            Location::AtNode { .. } => true,
            Location::OnEdge { k, entered, .. } => {
                k + 1 < spec.path.len() && (entered + ctx.base(spec.path.edges()[k])).saturating_sub(world.t) <= gate
            }
            Location::Pending => world.start_step(i).saturating_sub(world.t) <= gate,
            Location::Done => false,
        };
        if eligible {
            out.push(spec.id);
        }
    }
    out
}

/// Posterior over delay profiles given the history: a profile survives on
/// an edge iff it reproduces every completed traversal and lets every
/// in-progress traversal still be under way.
pub fn conditional_distribution(dist: &ScenarioDistribution, network: &RoadNetwork, world: &WorldState) -> Result<ScenarioDistribution> {
    let mut by_edge: BTreeMap<EdgeId, Vec<&Traversal>> = BTreeMap::new();
    for tr in &world.history {
        by_edge.entry(tr.edge).or_default().push(tr);
    }
    let mut out = dist.clone();
    for (edge, observations) in by_edge {
        let Some(list) = out.edges.get_mut(&edge) else { continue };
        let base = network.edge(edge).ok_or_else(|| invalid(format!("history names unknown edge {edge}")))?.base_travel_steps;
        let consistent = |p: ProfileId| {
            let profile = network.profile(p);
            observations.iter().all(|o| {
                let tau = base + profile.map_or(0, |d| d.delay(edge, o.entered));
                match o.travel {
                    Some(travel) => tau == travel,
                    None => tau > world.t - o.entered,
                }
            })
        };
        list.retain(|&(p, _)| consistent(p));
        let total: Ratio<i64> = list.iter().map(|(_, pr)| *pr).sum();
        if total.is_zero() {
            return Err(Error::EmptyPosterior { edge });
        }
        for (_, pr) in list.iter_mut() {
            *pr /= total;
        }
    }
    Ok(out)
}

/// Departure steps from the next nodes: the first at `t + remaining + w[0]`,
/// then each after the previous edge's travel time plus the next wait.
pub fn horizon_departure_times(t: Step, remaining: Step, waits: &WaitingVector, edges: &[EdgeId], travel: &dyn TravelTimes) -> Vec<Step> {
    departure_times_with(edges, t + remaining, waits, travel)
}

/// Where a horizon player's first departure is anchored.
#[derive(Debug, Clone, Copy)]
enum Anchor {
    Known(Step),
    /// On `edge` since `entered`; arrival time is uncertain.
    OnEdge { edge: EdgeId, entered: Step },
}

struct HorizonPlayer {
    index: usize,
    first_node: usize,
    edges: Vec<EdgeId>,
    anchor: Anchor,
    space: ActionSpace,
    initial: WaitingVector,
}

fn horizon_players(ctx: &SimContext<'_>, world: &WorldState, eligible: &[VehicleId]) -> Vec<HorizonPlayer> {
    let h = ctx.policy.config.horizon;
    let gate = ctx.gating_steps();
    let mut out = Vec::new();
    for (i, (spec, v)) in ctx.fleet.vehicles().iter().zip(&world.vehicles).enumerate() {
        let m = spec.path.len();
        let (first_node, len, anchor) = match v.location {
            Location::AtNode { k } => (k, (h + 1).min(m - k), Anchor::Known(world.t)),
            Location::OnEdge { k, entered, .. } => (k + 1, h.min(m - k - 1), Anchor::OnEdge { edge: spec.path.edges()[k], entered }),
            Location::Pending if world.start_step(i).saturating_sub(world.t) <= gate => (0, h.min(m), Anchor::Known(world.start_step(i))),
            _ => continue,
        };
        if len == 0 {
            continue;
        }
        let committed = WaitingVector((first_node..first_node + len).map(|n| v.committed_waits.get(&n).copied().unwrap_or(0)).collect());
        let space = if eligible.contains(&spec.id) {
            ActionSpace::bounded(len, v.remaining_budget_steps)
        } else if committed.total() <= v.remaining_budget_steps {
            ActionSpace::fixed(committed.clone())
        } else {
            ActionSpace::fixed(WaitingVector::zeros(len))
        };
        let initial = if space.contains(&committed) { committed } else { WaitingVector::zeros(len) };
        out.push(HorizonPlayer {
            index: i,
            first_node,
            edges: spec.path.edges()[first_node..first_node + len].to_vec(),
            anchor,
            space,
            initial,
        });
    }
    out
}

/// Rounded posterior-mean travel times, memoized per `(edge, entry)`.
struct MeanTravel<'a> {
    network: &'a RoadNetwork,
    posterior: HashMap<EdgeId, Vec<(&'a DelayProfile, Ratio<i64>)>>,
    cache: RefCell<HashMap<(EdgeId, Step), Step>>,
}

impl<'a> MeanTravel<'a> {
    fn new(ctx: &SimContext<'a>, posterior: &ScenarioDistribution) -> Self {
        let posterior = posterior
            .edges
            .iter()
            .map(|(&e, list)| (e, list.iter().map(|&(p, pr)| (ctx.profile(p), pr)).collect()))
            .collect();
        Self { network: ctx.network, posterior, cache: RefCell::new(HashMap::new()) }
    }

    fn mean(&self, edge: EdgeId, entry: Step) -> Ratio<i64> {
        let base = self.network.edge(edge).map_or(1, |e| e.base_travel_steps);
        let delay: Ratio<i64> = match self.posterior.get(&edge) {
            Some(list) => list.iter().map(|(p, pr)| *pr * i64::from(p.delay(edge, entry))).sum(),
            None => Ratio::zero(),
        };
        delay + i64::from(base)
    }
}

impl TravelTimes for MeanTravel<'_> {
    fn travel_time(&self, edge: EdgeId, entry: Step) -> Step {
        *self
            .cache
            .borrow_mut()
            .entry((edge, entry))
            .or_insert_with(|| (self.mean(edge, entry).round().to_integer() as Step).max(1))
    }
}

/// Travel times under a profile assignment on a subset of edges; other
/// edges run at base time.
struct PartialTravel<'a> {
    network: &'a RoadNetwork,
    assigned: HashMap<EdgeId, &'a DelayProfile>,
}

impl TravelTimes for PartialTravel<'_> {
    fn travel_time(&self, edge: EdgeId, entry: Step) -> Step {
        let base = self.network.edge(edge).map_or(1, |e| e.base_travel_steps);
        base + self.assigned.get(&edge).map_or(0, |p| p.delay(edge, entry))
    }
}

/// Merges profiles that agree on every entry step in `window` and at the
/// `extra` steps, keeping the lowest id as representative.
fn compress(
    ctx: &SimContext<'_>,
    dist: &ScenarioDistribution,
    window: (Step, Step),
    extra: &HashMap<EdgeId, Vec<Step>>,
) -> ScenarioDistribution {
    let mut out = ScenarioDistribution { edges: BTreeMap::new(), starts: dist.starts.clone() };
    for (&e, list) in &dist.edges {
        let mut classes: Vec<(Vec<Step>, ProfileId, Ratio<i64>)> = Vec::new();
        for &(p, pr) in list {
            let profile = ctx.profile(p);
            let key: Vec<Step> = (window.0..=window.1)
                .chain(extra.get(&e).into_iter().flatten().copied())
                .map(|t| profile.delay(e, t))
                .collect();
            match classes.iter_mut().find(|c| c.0 == key) {
                Some(c) => {
                    c.1 = c.1.min(p);
                    c.2 += pr;
                }
                None => classes.push((key, p, pr)),
            }
        }
        out.edges.insert(e, classes.into_iter().map(|(_, p, pr)| (p, pr)).collect());
    }
    out
}

/// Exact support when small enough, else a fixed sample.
fn support_for(ctx: &SimContext<'_>, dist: &ScenarioDistribution, samples: usize, seed: u64) -> Result<ScenarioSupport> {
    match enumerate_support(dist, ctx.policy.config.support_cap) {
        Err(Error::SupportTooLarge { size, .. }) => {
            log::debug!("support of {size} scenarios sampled down to {samples}");
            sample_support(dist, samples, seed)
        }
        other => other,
    }
}

/// Derives an independent stream seed (splitmix64 finalizer).
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn solve_horizon(
    ctx: &SimContext<'_>,
    players: &[HorizonPlayer],
    realizations: Vec<Realization<'_>>,
) -> Result<Vec<Decision>> {
    let trips: Vec<Trip> = players.iter().map(|p| Trip { vehicle: ctx.fleet.vehicles()[p.index].id, edges: p.edges.clone() }).collect();
    let game = PlatoonGame::new(ctx.network, trips, realizations, &ctx.payoffs)?;
    let spaces: Vec<ActionSpace> = players.iter().map(|p| p.space.clone()).collect();
    let initial = ActionProfile(players.iter().map(|p| p.initial.clone()).collect());
    let report = nash_seek(&game, initial, &spaces, &ctx.solve_options())?;
    Ok(players
        .iter()
        .zip(report.profile.0)
        .filter(|(p, _)| p.space.len() > 1)
        .map(|(p, waits)| Decision { vehicle: ctx.fleet.vehicles()[p.index].id, first_node: p.first_node, waits })
        .collect())
}

/// Horizon game on rounded posterior-mean travel times.
pub fn drhs_decide(ctx: &SimContext<'_>, world: &WorldState, eligible: &[VehicleId]) -> Result<Vec<Decision>> {
    if eligible.is_empty() {
        return Ok(Vec::new());
    }
    let posterior = conditional_distribution(&ctx.prior, ctx.network, world)?;
    let players = horizon_players(ctx, world, eligible);
    if players.is_empty() {
        return Ok(Vec::new());
    }
    let travel = MeanTravel::new(ctx, &posterior);
    let starts = players
        .iter()
        .map(|p| match p.anchor {
            Anchor::Known(s) => s,
            Anchor::OnEdge { edge, entered } => {
                let elapsed = i64::from(world.t - entered);
                let left = travel.mean(edge, entered) - elapsed;
                world.t + (left.round().to_integer().max(1) as Step)
            }
        })
        .collect();
    solve_horizon(ctx, &players, vec![Realization { travel: Box::new(travel), starts, weight: 1 }])
}

/// Horizon game on the posterior distribution: exact expectation when the
/// (compressed) support fits under the cap, else a fixed sample.
pub fn srhs_decide(ctx: &SimContext<'_>, world: &WorldState, eligible: &[VehicleId]) -> Result<Vec<Decision>> {
    if eligible.is_empty() {
        return Ok(Vec::new());
    }
    let posterior = conditional_distribution(&ctx.prior, ctx.network, world)?;
    let players = horizon_players(ctx, world, eligible);
    if players.is_empty() {
        return Ok(Vec::new());
    }
    let mut relevant: BTreeSet<EdgeId> = BTreeSet::new();
    let mut extra: HashMap<EdgeId, Vec<Step>> = HashMap::new();
    let mut horizon_end = world.t;
    for p in &players {
        // the last horizon edge never shifts a horizon departure
        relevant.extend(&p.edges[..p.edges.len().saturating_sub(1)]);
        let budget = world.vehicles[p.index].remaining_budget_steps;
        let mut latest = match p.anchor {
            Anchor::Known(s) => s,
            Anchor::OnEdge { edge, entered } => {
                relevant.insert(edge);
                extra.entry(edge).or_default().push(entered);
                (entered + ctx.max_travel(edge)).max(world.t + 1)
            }
        } + budget;
        for &e in &p.edges[..p.edges.len() - 1] {
            latest += ctx.max_travel(e);
        }
        horizon_end = horizon_end.max(latest);
    }
    let marginal = posterior.restricted_to(relevant);
    let compressed = compress(ctx, &ScenarioDistribution { edges: marginal.edges, starts: BTreeMap::new() }, (world.t, horizon_end), &extra);
    let support = support_for(ctx, &compressed, ctx.policy.config.srhs_samples, mix_seed(ctx.seed, u64::from(world.t)))?;

    let mut realizations = Vec::with_capacity(support.len());
    for (scenario, weight) in support.entries() {
        let assigned: HashMap<EdgeId, &DelayProfile> =
            scenario.profile_assignment.iter().map(|(&e, &p)| (e, ctx.profile(p))).collect();
        let starts = players
            .iter()
            .map(|p| match p.anchor {
                Anchor::Known(s) => s,
                Anchor::OnEdge { edge, entered } => {
                    let tau = ctx.travel_under(edge, scenario.profile_assignment.get(&edge).copied(), entered);
                    entered + tau.max(world.t + 1 - entered)
                }
            })
            .collect();
        realizations.push(Realization { travel: Box::new(PartialTravel { network: ctx.network, assigned }), starts, weight: *weight });
    }
    solve_horizon(ctx, &players, realizations)
}

/// Full-trip plans fixed before the first step.
fn open_loop_plan(ctx: &SimContext<'_>, truth: &Scenario) -> Result<ActionProfile> {
    let spaces: Vec<ActionSpace> = ctx.fleet.vehicles().iter().map(ActionSpace::for_vehicle).collect();
    let zeros = ActionProfile::zeros(ctx.fleet);
    match ctx.policy.kind {
        PolicyKind::Sp => Ok(zeros),
        PolicyKind::Ktt => {
            let game = PlatoonGame::deterministic(ctx.network, ctx.fleet, truth, &ctx.payoffs)?;
            Ok(nash_seek(&game, zeros, &spaces, &ctx.solve_options())?.profile)
        }
        PolicyKind::Ip => {
            let relevant: BTreeSet<EdgeId> = ctx.fleet.vehicles().iter().flat_map(|v| v.path.edges().iter().copied()).collect();
            let earliest = ctx.fleet.vehicles().iter().map(|v| v.start_step).min().unwrap_or(0);
            let latest = ctx
                .fleet
                .vehicles()
                .iter()
                .map(|v| {
                    let last_start = ctx.prior.starts.get(&v.id).and_then(|l| l.iter().map(|x| x.0).max()).unwrap_or(v.start_step);
                    last_start + v.waiting_budget_steps + v.path.edges().iter().map(|&e| ctx.max_travel(e)).sum::<Step>()
                })
                .max()
                .unwrap_or(earliest);
            let mut dist = compress(ctx, &ctx.prior.restricted_to(relevant), (earliest, latest), &HashMap::new());
            // unused edges pinned to one profile so every realization is complete
            for e in ctx.network.edges() {
                if let Some(&p) = e.delay_profile_ids.first() {
                    dist.edges.entry(e.id).or_insert_with(|| vec![(p, Ratio::from_integer(1))]);
                }
            }
            let support = support_for(ctx, &dist, ctx.policy.config.ip_samples, mix_seed(ctx.seed, u64::MAX))?;
            let game = PlatoonGame::stochastic(ctx.network, ctx.fleet, &support, &ctx.payoffs)?;
            Ok(nash_seek(&game, zeros, &spaces, &ctx.solve_options())?.profile)
        }
        PolicyKind::Drhs | PolicyKind::Srhs => Err(invalid("receding-horizon policies have no open-loop plan")),
    }
}

/// Processes starts and arrivals at the current step.
fn settle(ctx: &SimContext<'_>, world: &mut WorldState, events: &mut Vec<Event>) {
    let t = world.t;
    for (i, spec) in ctx.fleet.vehicles().iter().enumerate() {
        let v = &mut world.vehicles[i];
        match v.location {
            Location::Pending if world.starts[i] == t => {
                v.location = Location::AtNode { k: 0 };
                events.push(Event::new(t, EventKind::Start, vec![spec.id]).node(spec.path.nodes()[0]));
            }
            Location::OnEdge { k, entered, remaining_steps: 0 } => {
                let node = spec.path.nodes()[k + 1];
                if let Some(tr) = v.traversal.take() {
                    world.history[tr].travel = Some(t - entered);
                }
                events.push(Event::new(t, EventKind::Arrive, vec![spec.id]).node(node).edge(spec.path.edges()[k]));
                if k + 1 == spec.path.len() {
                    v.location = Location::Done;
                    events.push(Event::new(t, EventKind::Finish, vec![spec.id]).node(node).data(json!({
                        "utility": v.realized_utility,
                        "waited": v.waited_steps,
                    })));
                } else {
                    v.location = Location::AtNode { k: k + 1 };
                }
            }
            _ => {}
        }
    }
}

/// Applies decisions, moves every vehicle at a node (stay or leave),
/// records platoons, then advances the clock and settles the next step.
pub fn step_world(ctx: &SimContext<'_>, world: &mut WorldState, decisions: &[Decision], events: &mut Vec<Event>) -> Result<()> {
    let t = world.t;
    for d in decisions {
        let i = ctx.fleet.position(d.vehicle).ok_or_else(|| invalid(format!("decision for unknown vehicle {}", d.vehicle)))?;
        let v = &mut world.vehicles[i];
        for (j, &w) in d.waits.0.iter().enumerate() {
            v.committed_waits.insert(d.first_node + j, w);
        }
    }
    if !decisions.is_empty() {
        let waits: BTreeMap<String, &WaitingVector> = decisions.iter().map(|d| (d.vehicle.to_string(), &d.waits)).collect();
        let first: BTreeMap<String, usize> = decisions.iter().map(|d| (d.vehicle.to_string(), d.first_node)).collect();
        events.push(
            Event::new(t, EventKind::Decide, decisions.iter().map(|d| d.vehicle).collect())
                .data(json!({ "waits": waits, "first_node": first })),
        );
    }

    let truth = world.truth.travel_times(ctx.network)?;
    let mut entering: BTreeMap<EdgeId, Vec<usize>> = BTreeMap::new();
    for (i, spec) in ctx.fleet.vehicles().iter().enumerate() {
        let v = &mut world.vehicles[i];
        let Location::AtNode { k } = v.location else { continue };
        let node = spec.path.nodes()[k];
        let w = v.committed_waits.get(&k).copied().unwrap_or(0);
        if w > 0 {
            if v.remaining_budget_steps == 0 {
                return Err(Error::Invariant(format!("vehicle {} waits with an exhausted budget", spec.id)));
            }
            v.committed_waits.insert(k, w - 1);
            v.remaining_budget_steps -= 1;
            v.waited_steps += 1;
            v.realized_utility -= ctx.payoffs.waiting_cost.c_t_centi;
            events.push(Event::new(t, EventKind::Wait, vec![spec.id]).node(node));
        } else {
            let edge = spec.path.edges()[k];
            let tau = truth.travel_time(edge, t);
            if tau == 0 {
                return Err(Error::Invariant(format!("zero travel time on edge {edge}")));
            }
            v.location = Location::OnEdge { k, entered: t, remaining_steps: tau };
            v.traversal = Some(world.history.len());
            world.history.push(Traversal { vehicle: spec.id, edge, entered: t, travel: None });
            events.push(Event::new(t, EventKind::Depart, vec![spec.id]).node(node).edge(edge));
            entering.entry(edge).or_default().push(i);
        }
    }
    for (edge, members) in entering {
        let e = ctx.network.edge(edge).ok_or_else(|| invalid(format!("unknown edge {edge}")))?;
        let r = reward(&ctx.payoffs.reward, members.len() as u32, e)?;
        for &i in &members {
            world.vehicles[i].realized_utility += r;
        }
        if members.len() >= 2 {
            let ids: Vec<VehicleId> = members.iter().map(|&i| ctx.fleet.vehicles()[i].id).collect();
            let arrive = t + truth.travel_time(edge, t);
            events.push(Event::new(t, EventKind::Platoon, ids.clone()).edge(edge).data(json!({
                "leader": ids[0],
                "arrive": arrive,
            })));
        }
    }

    world.t += 1;
    for v in &mut world.vehicles {
        if let Location::OnEdge { remaining_steps, .. } = &mut v.location {
            *remaining_steps -= 1;
        }
    }
    settle(ctx, world, events);
    Ok(())
}

/// Runs one policy on one ground truth until every vehicle has arrived.
pub fn run_closed_loop(
    network: &RoadNetwork,
    fleet: &Fleet,
    dist: &ScenarioDistribution,
    ground_truth: &Scenario,
    policy: &Policy,
    payoffs: &Payoffs,
    seed: u64,
) -> Result<SimulationTrace> {
    run_closed_loop_observed(network, fleet, dist, ground_truth, policy, payoffs, seed, &mut |_, _| Ok(()))
}

/// [`run_closed_loop`] that shows `observe` the world at every step, after
/// arrivals are settled and before anyone decides.
#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop_observed(
    network: &RoadNetwork,
    fleet: &Fleet,
    dist: &ScenarioDistribution,
    ground_truth: &Scenario,
    policy: &Policy,
    payoffs: &Payoffs,
    seed: u64,
    observe: &mut dyn FnMut(&SimContext<'_>, &WorldState) -> Result<()>,
) -> Result<SimulationTrace> {
    let ctx = SimContext::new(network, fleet, dist, payoffs, policy, seed)?;
    let truth = Scenario {
        profile_assignment: ground_truth.profile_assignment.clone(),
        start_steps: ground_truth.start_steps.clone(),
    };
    truth.travel_times(network)?;
    let mut world = WorldState::new(fleet, truth.clone());
    let mut events = Vec::new();

    if !policy.kind.is_receding() {
        let plan = open_loop_plan(&ctx, &truth)?;
        for (v, w) in world.vehicles.iter_mut().zip(&plan.0) {
            v.committed_waits = w.0.iter().copied().enumerate().collect();
        }
        let decided: Vec<VehicleId> = fleet.vehicles().iter().map(|v| v.id).collect();
        if !decided.is_empty() {
            let waits: BTreeMap<String, &WaitingVector> =
                fleet.vehicles().iter().zip(&plan.0).map(|(v, w)| (v.id.to_string(), w)).collect();
            events.push(Event::new(world.t, EventKind::Decide, decided).data(json!({ "waits": waits })));
        }
    }

    settle(&ctx, &mut world, &mut events);
    while !world.all_done() {
        if world.t > policy.config.max_steps {
            return Err(Error::SimulationTimeout { steps: policy.config.max_steps });
        }
        observe(&ctx, &world)?;
        let decisions = match policy.kind {
            PolicyKind::Drhs => drhs_decide(&ctx, &world, &detect_decision_instance(&ctx, &world))?,
            PolicyKind::Srhs => srhs_decide(&ctx, &world, &detect_decision_instance(&ctx, &world))?,
            _ => Vec::new(),
        };
        step_world(&ctx, &mut world, &decisions, &mut events)?;
    }

    let utilities = fleet.vehicles().iter().zip(&world.vehicles).map(|(s, v)| (s.id, v.realized_utility)).collect();
    let waited_steps = fleet.vehicles().iter().zip(&world.vehicles).map(|(s, v)| (s.id, v.waited_steps)).collect();
    Ok(SimulationTrace { policy: policy.kind, events, utilities, waited_steps, end_step: world.t })
}
