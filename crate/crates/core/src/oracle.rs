//! Incremental utility evaluation for platoon games.
//!
//! A [`PlatoonGame`] holds a set of trips (one per player) and a weighted
//! list of realizations (travel times plus per-player start steps). The
//! value of a player is the weighted sum of its per-realization utility,
//! i.e. `denominator × expected utility`; a deterministic game is the
//! special case of one realization with weight 1.
//!
//! Occupancy counts per `(edge, step)` are cached for the last evaluated
//! profile and patched when only a few players changed, so a best
//! response costs `O(|W^i| · |P^i| · realizations)` instead of a full
//! re-evaluation of the fleet.

use std::cell::RefCell;
use std::collections::HashMap;

use num_rational::Ratio;

use crate::error::{invalid, Result};
use crate::game::{reward, ActionProfile, Fleet, Payoffs, Scenario, VehicleId, WaitingVector};
use crate::network::{EdgeId, RoadNetwork, Step, TravelTimes};
use crate::solver::UtilityOracle;
use crate::stochastic::ScenarioSupport;

/// The edges a player may platoon on, in order. The first departure is
/// `start + w[0]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trip {
    pub vehicle: VehicleId,
    pub edges: Vec<EdgeId>,
}

/// One weighted realization of travel times and start steps.
pub struct Realization<'a> {
    pub travel: Box<dyn TravelTimes + 'a>,
    /// Start step of every player, in player order.
    pub starts: Vec<Step>,
    pub weight: i128,
}

/// Per-edge `R(n)` and `r(n)` for `n = 0..=players`.
#[derive(Debug, Clone)]
struct RewardRow {
    per_member: Vec<i64>,
    cumulative: Vec<i64>,
}

#[derive(Debug, Clone, Default)]
struct Occupancy {
    profile: Vec<WaitingVector>,
    /// `[realization][player]` departure steps.
    departures: Vec<Vec<Vec<Step>>>,
    /// `[realization]` count of entries per `(edge slot, step)`.
    counts: Vec<HashMap<(u32, Step), u32>>,
}

pub struct PlatoonGame<'a> {
    trips: Vec<Trip>,
    /// Trip edges mapped to dense reward-row slots.
    slots: Vec<Vec<u32>>,
    rows: Vec<RewardRow>,
    realizations: Vec<Realization<'a>>,
    denominator: i128,
    cost_per_step: i64,
    approximate: bool,
    cache: RefCell<Option<Occupancy>>,
}

impl<'a> PlatoonGame<'a> {
    pub fn new(
        network: &RoadNetwork,
        trips: Vec<Trip>,
        realizations: Vec<Realization<'a>>,
        payoffs: &Payoffs,
    ) -> Result<Self> {
        if realizations.is_empty() {
            return Err(invalid("a game needs at least one realization"));
        }
        for r in &realizations {
            if r.starts.len() != trips.len() {
                return Err(invalid("realization start steps do not match the players"));
            }
            if r.weight <= 0 {
                return Err(invalid("realization weights must be positive"));
            }
        }
        if trips.iter().any(|t| t.edges.is_empty()) {
            return Err(invalid("every trip needs at least one edge"));
        }
        let max_size = trips.len() as u32;
        let mut slot_of: HashMap<EdgeId, u32> = HashMap::new();
        let mut rows = Vec::new();
        let mut slots = Vec::with_capacity(trips.len());
        for trip in &trips {
            let mut s = Vec::with_capacity(trip.edges.len());
            for &e in &trip.edges {
                let slot = match slot_of.get(&e) {
                    Some(&slot) => slot,
                    None => {
                        let edge = network.edge(e).ok_or_else(|| invalid(format!("unknown edge {e}")))?;
                        let mut per_member = vec![0];
                        let mut cumulative = vec![0];
                        for n in 1..=max_size {
                            let r = reward(&payoffs.reward, n, edge)?;
                            per_member.push(r);
                            cumulative.push(cumulative.last().unwrap() + r);
                        }
                        rows.push(RewardRow { per_member, cumulative });
                        slot_of.insert(e, rows.len() as u32 - 1);
                        rows.len() as u32 - 1
                    }
                };
                s.push(slot);
            }
            slots.push(s);
        }
        let denominator = realizations.iter().map(|r| r.weight).sum();
        Ok(Self {
            trips,
            slots,
            rows,
            realizations,
            denominator,
            cost_per_step: payoffs.waiting_cost.c_t_centi,
            approximate: false,
            cache: RefCell::new(None),
        })
    }

    /// The game on a fleet's full paths under one scenario.
    pub fn deterministic(network: &'a RoadNetwork, fleet: &Fleet, scenario: &Scenario, payoffs: &Payoffs) -> Result<Self> {
        let realization = Realization {
            travel: Box::new(scenario.travel_times(network)?),
            starts: scenario.starts(fleet),
            weight: 1,
        };
        Self::new(network, fleet_trips(fleet), vec![realization], payoffs)
    }

    /// The expected-utility game over an enumerated or sampled support.
    pub fn stochastic(
        network: &'a RoadNetwork,
        fleet: &Fleet,
        support: &ScenarioSupport,
        payoffs: &Payoffs,
    ) -> Result<Self> {
        let realizations = support
            .entries()
            .iter()
            .map(|(scenario, weight)| {
                Ok(Realization {
                    travel: Box::new(scenario.travel_times(network)?),
                    starts: scenario.starts(fleet),
                    weight: *weight,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut game = Self::new(network, fleet_trips(fleet), realizations, payoffs)?;
        game.approximate = support.is_approximate();
        if game.denominator != support.denominator() {
            return Err(invalid("support weights do not sum to its denominator"));
        }
        Ok(game)
    }

    pub fn with_approximate(mut self, approximate: bool) -> Self {
        self.approximate = approximate;
        self
    }

    /// True when the realizations are a Monte Carlo sample rather than the
    /// exact support.
    pub fn is_approximate(&self) -> bool {
        self.approximate
    }

    pub fn trips(&self) -> &[Trip] {
        &self.trips
    }

    /// Sum of realization weights; values are scaled by this.
    pub fn denominator(&self) -> i128 {
        self.denominator
    }

    pub fn realization_count(&self) -> usize {
        self.realizations.len()
    }

    /// A value as an exact expectation.
    pub fn expectation(&self, value: i128) -> Ratio<i128> {
        Ratio::new(value, self.denominator)
    }

    fn departures(&self, r: usize, player: usize, waits: &WaitingVector) -> Vec<Step> {
        let real = &self.realizations[r];
        let edges = &self.trips[player].edges;
        let mut out = Vec::with_capacity(edges.len());
        let mut d = real.starts[player] + waits.0[0];
        out.push(d);
        for k in 1..edges.len() {
            d = d + real.travel.travel_time(edges[k - 1], d) + waits.0[k];
            out.push(d);
        }
        out
    }

    fn check_profile(&self, profile: &ActionProfile) -> Result<()> {
        if profile.len() != self.trips.len() {
            return Err(invalid(format!("profile has {} entries for {} players", profile.len(), self.trips.len())));
        }
        for (t, w) in self.trips.iter().zip(&profile.0) {
            if w.len() != t.edges.len() {
                return Err(invalid(format!("vehicle {}: {} waits for {} edges", t.vehicle, w.len(), t.edges.len())));
            }
        }
        Ok(())
    }

    fn build(&self, profile: &ActionProfile) -> Occupancy {
        let mut occ = Occupancy {
            profile: profile.0.clone(),
            departures: Vec::with_capacity(self.realizations.len()),
            counts: Vec::with_capacity(self.realizations.len()),
        };
        for r in 0..self.realizations.len() {
            let mut deps = Vec::with_capacity(self.trips.len());
            let mut counts = HashMap::new();
            for (p, w) in profile.0.iter().enumerate() {
                let d = self.departures(r, p, w);
                for (&slot, &t) in self.slots[p].iter().zip(&d) {
                    *counts.entry((slot, t)).or_insert(0) += 1;
                }
                deps.push(d);
            }
            occ.departures.push(deps);
            occ.counts.push(counts);
        }
        occ
    }

    fn patch(&self, occ: &mut Occupancy, player: usize, waits: &WaitingVector) {
        for r in 0..self.realizations.len() {
            let counts = &mut occ.counts[r];
            for (&slot, &t) in self.slots[player].iter().zip(&occ.departures[r][player]) {
                let c = counts.get_mut(&(slot, t)).expect("cached departure is counted");
                *c -= 1;
                if *c == 0 {
                    counts.remove(&(slot, t));
                }
            }
            let d = self.departures(r, player, waits);
            for (&slot, &t) in self.slots[player].iter().zip(&d) {
                *counts.entry((slot, t)).or_insert(0) += 1;
            }
            occ.departures[r][player] = d;
        }
        occ.profile[player] = waits.clone();
    }

    /// Runs `f` on occupancy synchronized with `profile`.
    fn with_occupancy<T>(&self, profile: &ActionProfile, f: impl FnOnce(&Occupancy) -> T) -> T {
        let mut cache = self.cache.borrow_mut();
        let stale = match cache.as_ref() {
            None => true,
            Some(occ) => {
                let changed: Vec<usize> = (0..profile.len()).filter(|&p| occ.profile[p] != profile.0[p]).collect();
                // patching costs about as much as rebuilding once many players moved
                if changed.len() * 4 > profile.len().max(4) {
                    true
                } else {
                    let occ = cache.as_mut().unwrap();
                    for p in changed {
                        self.patch(occ, p, &profile.0[p]);
                    }
                    false
                }
            }
        };
        if stale {
            *cache = Some(self.build(profile));
        }
        f(cache.as_ref().unwrap())
    }

    fn evaluate(&self, player: usize, occ: &Occupancy, candidates: &[WaitingVector]) -> Vec<i128> {
        let slots = &self.slots[player];
        let mut values = vec![0i128; candidates.len()];
        for (r, real) in self.realizations.iter().enumerate() {
            let counts = &occ.counts[r];
            let own = &occ.departures[r][player];
            for (c, cand) in candidates.iter().enumerate() {
                let d = self.departures(r, player, cand);
                let mut gained: i64 = 0;
                for (&slot, &t) in slots.iter().zip(&d) {
                    let mut others = counts.get(&(slot, t)).copied().unwrap_or(0);
                    // the player's current entries are included in the counts;
                    // departures are strictly increasing so at most one matches
                    if own.iter().zip(slots).any(|(&ot, &os)| os == slot && ot == t) {
                        others -= 1;
                    }
                    gained += self.rows[slot as usize].per_member[others as usize + 1];
                }
                values[c] += real.weight * i128::from(gained);
            }
        }
        for (v, cand) in values.iter_mut().zip(candidates) {
            *v -= self.denominator * i128::from(self.cost_per_step * i64::from(cand.total()));
        }
        values
    }
}

pub fn fleet_trips(fleet: &Fleet) -> Vec<Trip> {
    fleet.vehicles().iter().map(|v| Trip { vehicle: v.id, edges: v.path.edges().to_vec() }).collect()
}

impl UtilityOracle for PlatoonGame<'_> {
    type Value = i128;

    fn player_count(&self) -> usize {
        self.trips.len()
    }

    fn utility(&self, player: usize, profile: &ActionProfile) -> Result<i128> {
        let own = profile.0.get(player).ok_or_else(|| invalid(format!("player {player} out of range")))?;
        Ok(self.deviation_utilities(player, profile, std::slice::from_ref(own))?[0])
    }

    fn deviation_utilities(&self, player: usize, profile: &ActionProfile, candidates: &[WaitingVector]) -> Result<Vec<i128>> {
        self.check_profile(profile)?;
        if player >= self.trips.len() {
            return Err(invalid(format!("player {player} out of range")));
        }
        let len = self.trips[player].edges.len();
        if let Some(bad) = candidates.iter().find(|c| c.len() != len) {
            return Err(invalid(format!("candidate {bad} does not match a {len}-edge trip")));
        }
        Ok(self.with_occupancy(profile, |occ| self.evaluate(player, occ, candidates)))
    }

    fn potential(&self, profile: &ActionProfile) -> Option<i128> {
        self.check_profile(profile).ok()?;
        let costs: i64 = profile.0.iter().map(|w| self.cost_per_step * i64::from(w.total())).sum();
        let value = self.with_occupancy(profile, |occ| {
            let mut total = 0i128;
            for (real, counts) in self.realizations.iter().zip(&occ.counts) {
                let sum: i64 = counts.iter().map(|(&(slot, _), &n)| self.rows[slot as usize].cumulative[n as usize]).sum();
                total += real.weight * i128::from(sum);
            }
            total
        });
        Some(value - self.denominator * i128::from(costs))
    }
}
