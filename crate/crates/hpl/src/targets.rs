//! Lifted target sets and the shift register of the most recent ones.
//!
//! A strategy box lives in the reduced strategy space. Lifting it produces
//! a full-dimensional terminal set: states whose strategy projection lands
//! in the box and whose constraint coordinates satisfy a risk-blended
//! predicate. At risk level `beta = 0` the blend is exactly the safe set,
//! so reaching the target set guarantees the safety controller can take
//! over; at `beta = 1` it degrades to the raw task constraints.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Environment, MAX_COORDS};
use crate::safety::SafeSet;

/// Weight of the blended-predicate hinge term relative to the box
/// distance in the distance surrogate.
const PREDICATE_WEIGHT: f64 = 10.0;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("risk level beta must lie in [0, 1], got {0}")]
    BetaOutOfRange(f64),
    #[error("distance to an empty target set is undefined")]
    EmptyTargetSet,
}

/// A (possibly empty) terminal set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetSet {
    Empty,
    Box(TargetBox),
}

impl TargetSet {
    pub fn is_empty(&self) -> bool {
        matches!(self, TargetSet::Empty)
    }

    pub fn as_box(&self) -> Option<&TargetBox> {
        match self {
            TargetSet::Empty => None,
            TargetSet::Box(b) => Some(b),
        }
    }
}

/// The payload of a non-empty target set: a hyperrectangle in strategy
/// space (already anchored into `g(x)` coordinates) plus the blend data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetBox {
    pub state_box: Vec<(f64, f64)>,
    pub beta: f64,
    pub created_step: usize,
    pub due_step: usize,
}

/// Lifts an anchored strategy-space box into a full-dimensional target
/// set at risk level `beta`.
///
/// An unsatisfiable box is not detected here; it simply yields a set whose
/// membership is everywhere false, which surfaces later as infeasibility.
pub fn lift(
    state_box: Vec<(f64, f64)>,
    beta: f64,
    created_step: usize,
    due_step: usize,
) -> Result<TargetSet, TargetError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(TargetError::BetaOutOfRange(beta));
    }
    Ok(TargetSet::Box(TargetBox {
        state_box,
        beta,
        created_step,
        due_step,
    }))
}

impl TargetBox {
    /// Per-coordinate blended bounds: the convex combination of the safe
    /// set's bound and the environment's bound at `x`.
    fn blended_bounds_into(
        &self,
        env: &dyn Environment,
        safe: &SafeSet,
        x: &[f64],
        out: &mut [(f64, f64)],
    ) {
        let d = env.coord_dim();
        let mut env_bounds = [(0.0, 0.0); MAX_COORDS];
        env.env_bounds_into(x, &mut env_bounds[..d]);
        for i in 0..d {
            let (slo, shi) = safe.bounds[i];
            let (elo, ehi) = env_bounds[i];
            out[i] = (
                (1.0 - self.beta) * slo + self.beta * elo,
                (1.0 - self.beta) * shi + self.beta * ehi,
            );
        }
    }

    /// Membership: strategy projection inside the box and every constraint
    /// coordinate inside its blended bounds. Closed intervals throughout.
    pub fn membership(&self, env: &dyn Environment, safe: &SafeSet, x: &[f64]) -> bool {
        let n_sx = env.strategy_state_dim();
        let mut g = [0.0; MAX_COORDS];
        env.project_state(x, &mut g[..n_sx]);
        if !g[..n_sx]
            .iter()
            .zip(&self.state_box)
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
        {
            return false;
        }
        let d = env.coord_dim();
        let mut blended = [(0.0, 0.0); MAX_COORDS];
        self.blended_bounds_into(env, safe, x, &mut blended[..d]);
        let mut coords = [0.0; MAX_COORDS];
        env.coords_into(x, &mut coords[..d]);
        coords[..d]
            .iter()
            .zip(&blended[..d])
            .all(|(c, (lo, hi))| *c >= *lo && *c <= *hi)
    }

    /// Distance surrogate: Euclidean clamp distance from the strategy
    /// projection to the box, plus a hinge penalty on violations of the
    /// blended predicate. Zero exactly on members.
    pub fn distance(&self, env: &dyn Environment, safe: &SafeSet, x: &[f64]) -> f64 {
        let n_sx = env.strategy_state_dim();
        let mut g = [0.0; MAX_COORDS];
        env.project_state(x, &mut g[..n_sx]);
        let mut box_d2 = 0.0;
        for (v, (lo, hi)) in g[..n_sx].iter().zip(&self.state_box) {
            let excess = (lo - v).max(0.0) + (v - hi).max(0.0);
            box_d2 += excess * excess;
        }
        let d = env.coord_dim();
        let mut blended = [(0.0, 0.0); MAX_COORDS];
        self.blended_bounds_into(env, safe, x, &mut blended[..d]);
        let mut coords = [0.0; MAX_COORDS];
        env.coords_into(x, &mut coords[..d]);
        let hinge: f64 = coords[..d]
            .iter()
            .zip(&blended[..d])
            .map(|(c, (lo, hi))| (lo - c).max(0.0) + (c - hi).max(0.0))
            .sum();
        box_d2.sqrt() + PREDICATE_WEIGHT * hinge
    }
}

/// Distance from a state to a target set; an empty set has no distance.
pub fn distance_to_target(
    x: &[f64],
    set: &TargetSet,
    env: &dyn Environment,
    safe: &SafeSet,
) -> Result<f64, TargetError> {
    match set {
        TargetSet::Empty => Err(TargetError::EmptyTargetSet),
        TargetSet::Box(b) => Ok(b.distance(env, safe, x)),
    }
}

/// Shift register of exactly `T` target sets, oldest first. Slot `j` holds
/// the set due at step `k + j + 1` once the list has been pushed at step
/// `k`.
#[derive(Debug, Clone)]
pub struct SetList {
    slots: VecDeque<TargetSet>,
}

impl SetList {
    /// A fresh list of `t` empty slots.
    pub fn new(t: usize) -> Self {
        assert!(t >= 1, "the set list needs at least one slot");
        Self {
            slots: (0..t).map(|_| TargetSet::Empty).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the list always holds exactly T slots
    }

    /// Drops the oldest slot and appends `set`; length is preserved.
    pub fn push(&mut self, set: TargetSet) {
        self.slots.pop_front();
        self.slots.push_back(set);
    }

    pub fn get(&self, j: usize) -> &TargetSet {
        &self.slots[j]
    }

    pub fn all_empty(&self) -> bool {
        self.slots.iter().all(|s| s.is_empty())
    }

    pub fn iter(&self) -> impl Iterator<Item = &TargetSet> {
        self.slots.iter()
    }

    /// Indices of non-empty slots, oldest first.
    pub fn nonempty_indices(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(|(j, _)| j)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvFamily, Segment, TubeEnv};

    fn flat_tube() -> TubeEnv {
        TubeEnv::new(
            "flat".into(),
            EnvFamily::Tube,
            vec![Segment {
                slope: 0.0,
                length: 40.0,
            }],
            0.4,
        )
    }

    fn boxed(list: &[(f64, f64)], beta: f64) -> TargetSet {
        lift(list.to_vec(), beta, 0, 5).unwrap()
    }

    #[test]
    fn beta_zero_requires_safe_set_membership() {
        let env = flat_tube();
        let safe = SafeSet::shipped(&env);
        let t = boxed(&[(0.0, 5.0), (-0.2, 0.2)], 0.0);
        let b = t.as_box().unwrap();
        // Inside box and safe set.
        assert!(b.membership(&env, &safe, &[1.0, 0.5, 0.0, 0.0]));
        // Inside box and walls, but offset beyond the safe band: at zero
        // risk this is not a member even though the box allows it.
        assert!(!b.membership(&env, &safe, &[1.0, 0.5, 0.15, 0.0]));
    }

    #[test]
    fn beta_one_requires_only_task_constraints() {
        let env = flat_tube();
        let safe = SafeSet::shipped(&env);
        let t = boxed(&[(0.0, 5.0), (-0.2, 0.2)], 1.0);
        let b = t.as_box().unwrap();
        assert!(b.membership(&env, &safe, &[1.0, 1.8, 0.15, 0.0]));
        assert!(!b.membership(&env, &safe, &[1.0, 2.1, 0.15, 0.0]));
    }

    #[test]
    fn blended_scalar_bound_is_the_convex_combination() {
        // safe bound 0.5, env bound 10, beta 0.5 -> 5.25.
        let blended: f64 = (1.0 - 0.5) * 0.5 + 0.5 * 10.0;
        assert!((blended - 5.25).abs() < 1e-12);
    }

    #[test]
    fn member_distance_is_zero_and_vice_versa() {
        let env = flat_tube();
        let safe = SafeSet::shipped(&env);
        let t = boxed(&[(0.0, 5.0), (-0.1, 0.1)], 0.0);
        let b = t.as_box().unwrap();
        let member = [1.0, 0.5, 0.0, 0.0];
        assert_eq!(b.distance(&env, &safe, &member), 0.0);
        assert!(b.membership(&env, &safe, &member));
        let outside = [1.0, 0.5, 0.16, 0.0];
        assert!(b.distance(&env, &safe, &outside) > 0.0);
        assert!(!b.membership(&env, &safe, &outside));
    }

    #[test]
    fn one_unit_outside_one_box_face_costs_one() {
        let env = flat_tube();
        let safe = SafeSet::shipped(&env);
        // Box on arc length only; predicate satisfied at the probe state.
        let t = boxed(&[(2.0, 5.0), (-0.12, 0.12)], 0.0);
        let b = t.as_box().unwrap();
        // Arc length 1.0 is one unit below the box's lower face.
        let x = [1.0, 0.5, 0.0, 0.0];
        assert!((b.distance(&env, &safe, &x) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_target_distance_is_a_contract_violation() {
        let env = flat_tube();
        let safe = SafeSet::shipped(&env);
        assert!(matches!(
            distance_to_target(&[0.0, 0.0, 0.0, 0.0], &TargetSet::Empty, &env, &safe),
            Err(TargetError::EmptyTargetSet)
        ));
    }

    #[test]
    fn push_shifts_and_preserves_length() {
        let mut list = SetList::new(3);
        assert!(list.all_empty());
        let a = boxed(&[(0.0, 1.0), (0.0, 1.0)], 0.0);
        let b = boxed(&[(1.0, 2.0), (0.0, 1.0)], 0.0);
        let c = boxed(&[(2.0, 3.0), (0.0, 1.0)], 0.0);
        let d = boxed(&[(3.0, 4.0), (0.0, 1.0)], 0.0);
        list.push(a.clone());
        list.push(b.clone());
        list.push(c.clone());
        assert_eq!(list.get(0), &a);
        list.push(d.clone());
        assert_eq!(list.len(), 3);
        assert_eq!(list.get(0), &b);
        assert_eq!(list.get(1), &c);
        assert_eq!(list.get(2), &d);
    }

    #[test]
    fn pushing_empties_keeps_the_list_all_empty() {
        let mut list = SetList::new(4);
        for _ in 0..10 {
            list.push(TargetSet::Empty);
        }
        assert!(list.all_empty());
        assert_eq!(list.len(), 4);
    }

    #[test]
    fn lift_rejects_bad_beta() {
        assert!(matches!(
            lift(vec![(0.0, 1.0)], 1.5, 0, 5),
            Err(TargetError::BetaOutOfRange(_))
        ));
    }
}
