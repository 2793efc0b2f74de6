//! Best-response dynamics for finite games given by a utility oracle.
//!
//! Players are updated one at a time in a fixed order, each replacing its
//! action by a best response, until a full pass changes nothing. In an
//! exact potential game every strict change raises the potential, so the
//! loop terminates at a pure Nash equilibrium.

use std::fmt::Debug;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::game::{ActionProfile, VehicleSpec, WaitingVector};
use crate::network::Step;

pub const DEFAULT_ROUND_CAP: usize = 10_000;

/// The finite action set of one player, in a fixed order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSpace {
    actions: Vec<WaitingVector>,
}

impl ActionSpace {
    /// All waiting vectors of `len` entries with total at most `budget`.
    pub fn bounded(len: usize, budget: Step) -> Self {
        Self { actions: enumerate_waits(len, budget) }
    }

    /// A player whose action is fixed.
    pub fn fixed(action: WaitingVector) -> Self {
        Self { actions: vec![action] }
    }

    pub fn from_actions(actions: Vec<WaitingVector>) -> Result<Self> {
        if actions.is_empty() {
            return Err(Error::InvalidInput("an action space must be nonempty".into()));
        }
        Ok(Self { actions })
    }

    pub fn for_vehicle(vehicle: &VehicleSpec) -> Self {
        Self { actions: enumerate_actions(vehicle) }
    }

    pub fn actions(&self) -> &[WaitingVector] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn contains(&self, action: &WaitingVector) -> bool {
        self.actions.contains(action)
    }
}

/// Every feasible waiting vector of the vehicle, in lexicographic order.
pub fn enumerate_actions(vehicle: &VehicleSpec) -> Vec<WaitingVector> {
    enumerate_waits(vehicle.path.len(), vehicle.waiting_budget_steps)
}

pub fn enumerate_waits(len: usize, budget: Step) -> Vec<WaitingVector> {
    fn rec(prefix: &mut Vec<Step>, len: usize, left: Step, out: &mut Vec<WaitingVector>) {
        if prefix.len() == len {
            out.push(WaitingVector(prefix.clone()));
            return;
        }
        for w in 0..=left {
            prefix.push(w);
            rec(prefix, len, left - w, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(len), len, budget, &mut out);
    out
}

/// Deterministic per-player utility evaluation.
pub trait UtilityOracle {
    type Value: Copy + Ord + Debug;

    fn player_count(&self) -> usize;

    fn utility(&self, player: usize, profile: &ActionProfile) -> Result<Self::Value>;

    /// Utility of `player` for each candidate action, the other players
    /// fixed as in `profile`.
    fn deviation_utilities(
        &self,
        player: usize,
        profile: &ActionProfile,
        candidates: &[WaitingVector],
    ) -> Result<Vec<Self::Value>> {
        let mut scratch = profile.clone();
        candidates
            .iter()
            .map(|c| {
                scratch.set(player, c.clone());
                self.utility(player, &scratch)
            })
            .collect()
    }

    /// Exact potential of the profile, when the oracle knows one.
    fn potential(&self, _profile: &ActionProfile) -> Option<Self::Value> {
        None
    }
}

impl<O: UtilityOracle + ?Sized> UtilityOracle for &O {
    type Value = O::Value;

    fn player_count(&self) -> usize {
        (**self).player_count()
    }

    fn utility(&self, player: usize, profile: &ActionProfile) -> Result<Self::Value> {
        (**self).utility(player, profile)
    }

    fn deviation_utilities(
        &self,
        player: usize,
        profile: &ActionProfile,
        candidates: &[WaitingVector],
    ) -> Result<Vec<Self::Value>> {
        (**self).deviation_utilities(player, profile, candidates)
    }

    fn potential(&self, profile: &ActionProfile) -> Option<Self::Value> {
        (**self).potential(profile)
    }
}

/// Picks a maximizer: the current action if it attains the maximum,
/// otherwise the first maximizer in the space's order.
fn pick_best<V: Ord + Copy>(values: &[V], current: Option<usize>) -> usize {
    let best = *values.iter().max().expect("action spaces are nonempty");
    match current {
        Some(c) if values[c] == best => c,
        _ => values.iter().position(|&v| v == best).unwrap(),
    }
}

/// A best response of `player` against the rest of `profile`.
pub fn best_response<O: UtilityOracle>(
    player: usize,
    profile: &ActionProfile,
    oracle: &O,
    space: &ActionSpace,
) -> Result<WaitingVector> {
    let values = oracle.deviation_utilities(player, profile, space.actions())?;
    let current = space.actions().iter().position(|a| a == profile.get(player));
    Ok(space.actions()[pick_best(&values, current)].clone())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolveOptions {
    /// Player update order; ascending index when `None`.
    pub order: Option<Vec<usize>>,
    pub round_cap: usize,
    /// Record the potential after every action change.
    pub track_potential: bool,
    /// Run the exhaustive unilateral-deviation check on the result.
    pub verify: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { order: None, round_cap: DEFAULT_ROUND_CAP, track_potential: false, verify: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolveReport<V> {
    pub profile: ActionProfile,
    /// Passes over all players, including the final pass without changes.
    pub rounds: usize,
    /// Number of single-action utility evaluations.
    pub evaluations: usize,
    /// Potential at the start and after each action change.
    pub potential_trajectory: Option<Vec<V>>,
    pub verified: bool,
}

/// JSON form of a [`SolveReport`], with profiles keyed by vehicle id.
#[derive(Debug, Clone, Serialize)]
pub struct SolveReportFile {
    pub profile: std::collections::BTreeMap<crate::game::VehicleId, WaitingVector>,
    pub rounds: usize,
    pub evaluations: usize,
    pub verified: bool,
}

impl<V> SolveReport<V> {
    pub fn to_file(&self, fleet: &crate::game::Fleet) -> SolveReportFile {
        SolveReportFile {
            profile: self.profile.to_id_map(fleet),
            rounds: self.rounds,
            evaluations: self.evaluations,
            verified: self.verified,
        }
    }
}

/// Round-robin best-response dynamics from `initial`.
pub fn nash_seek<O: UtilityOracle>(
    oracle: &O,
    initial: ActionProfile,
    spaces: &[ActionSpace],
    options: &SolveOptions,
) -> Result<SolveReport<O::Value>> {
    let n = oracle.player_count();
    if spaces.len() != n || initial.len() != n {
        return Err(Error::InvalidInput(format!(
            "{} action spaces and {} initial actions for {n} players",
            spaces.len(),
            initial.len()
        )));
    }
    let order: Vec<usize> = match &options.order {
        Some(o) => {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if sorted != (0..n).collect::<Vec<_>>() {
                return Err(Error::InvalidInput("update order must be a permutation of the players".into()));
            }
            o.clone()
        }
        None => (0..n).collect(),
    };

    let mut profile = initial;
    let mut trajectory = options.track_potential.then(|| oracle.potential(&profile).into_iter().collect::<Vec<_>>());
    let mut evaluations = 0;
    let mut rounds = 0;
    loop {
        if rounds == options.round_cap {
            return Err(Error::NonConvergence { rounds });
        }
        rounds += 1;
        let mut changed = false;
        for &i in &order {
            let space = &spaces[i];
            if space.len() == 1 && space.actions()[0] == *profile.get(i) {
                continue;
            }
            let values = oracle.deviation_utilities(i, &profile, space.actions())?;
            evaluations += values.len();
            let current = space.actions().iter().position(|a| a == profile.get(i));
            let pick = pick_best(&values, current);
            if Some(pick) != current {
                profile.set(i, space.actions()[pick].clone());
                changed = true;
                if let Some(t) = trajectory.as_mut() {
                    t.extend(oracle.potential(&profile));
                }
            }
        }
        if !changed {
            break;
        }
    }
    let verified = options.verify && verify_ne(&profile, oracle, spaces)?;
    Ok(SolveReport { profile, rounds, evaluations, potential_trajectory: trajectory, verified })
}

/// True iff no player has a strictly improving unilateral deviation.
pub fn verify_ne<O: UtilityOracle>(profile: &ActionProfile, oracle: &O, spaces: &[ActionSpace]) -> Result<bool> {
    for (i, space) in spaces.iter().enumerate() {
        let current = oracle.utility(i, profile)?;
        let values = oracle.deviation_utilities(i, profile, space.actions())?;
        if values.into_iter().any(|v| v > current) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Exhaustively finds a potential-maximizing profile. Returns `None` when
/// the oracle has no potential or the joint space exceeds `limit`.
pub fn brute_force_potential_max<O: UtilityOracle>(
    oracle: &O,
    spaces: &[ActionSpace],
    limit: u128,
) -> Option<(ActionProfile, O::Value)> {
    let size = spaces.iter().try_fold(1u128, |acc, s| acc.checked_mul(s.len() as u128))?;
    if size > limit {
        return None;
    }
    let mut idx = vec![0usize; spaces.len()];
    let mut best: Option<(ActionProfile, O::Value)> = None;
    loop {
        let profile = ActionProfile(idx.iter().zip(spaces).map(|(&k, s)| s.actions()[k].clone()).collect());
        let phi = oracle.potential(&profile)?;
        if best.as_ref().is_none_or(|(_, b)| phi > *b) {
            best = Some((profile, phi));
        }
        let mut k = 0;
        loop {
            if k == spaces.len() {
                return best;
            }
            idx[k] += 1;
            if idx[k] < spaces[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}
