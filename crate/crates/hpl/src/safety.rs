//! Safe sets and safety policies: the invariance layer everything else
//! leans on.
//!
//! A `SafeSet` is a box over an environment's constraint coordinates. Its
//! defining property is closure under the environment's safety controller:
//! from any member, applying the safety law forever keeps the system a
//! member and inside the joint constraints. That property is certified by
//! `verify_invariance` (sampling-based forward rollouts) and the largest
//! certifiable box of a monotone family is found by `estimate_safe_set`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::{Environment, MAX_COORDS};
use crate::rng;

#[derive(Debug, Error)]
pub enum SafetyError {
    #[error(
        "no invariant member found for {env_id}: even the core candidate box \
         leaks under the safety policy; a different policy is needed"
    )]
    NoInvariantMember { env_id: String },
    #[error("safe set bound count {got} does not match environment coordinate count {expected}")]
    BoundMismatch { expected: usize, got: usize },
}

/// An axis-aligned box over an environment's constraint coordinates,
/// paired implicitly with that environment's safety policy.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SafeSet {
    pub env_id: String,
    pub bounds: Vec<(f64, f64)>,
}

impl SafeSet {
    /// The pinned safe set shipped for an environment family, produced
    /// offline by `estimate_safe_set`.
    pub fn shipped(env: &dyn Environment) -> Self {
        Self {
            env_id: env.id().to_string(),
            bounds: env.shipped_safe_bounds(),
        }
    }

    pub fn new(env: &dyn Environment, bounds: Vec<(f64, f64)>) -> Result<Self, SafetyError> {
        if bounds.len() != env.coord_dim() {
            return Err(SafetyError::BoundMismatch {
                expected: env.coord_dim(),
                got: bounds.len(),
            });
        }
        Ok(Self {
            env_id: env.id().to_string(),
            bounds,
        })
    }

    /// Membership of the parametric predicate; closed intervals.
    pub fn contains(&self, env: &dyn Environment, x: &[f64]) -> bool {
        let d = env.coord_dim();
        debug_assert_eq!(d, self.bounds.len());
        let mut coords = [0.0; MAX_COORDS];
        env.coords_into(x, &mut coords[..d]);
        coords[..d]
            .iter()
            .zip(&self.bounds)
            .all(|(c, (lo, hi))| *c >= *lo && *c <= *hi)
    }

    /// Total exceedance of the set bounds at `x`; zero iff member.
    pub fn violation(&self, env: &dyn Environment, x: &[f64]) -> f64 {
        let d = env.coord_dim();
        let mut coords = [0.0; MAX_COORDS];
        env.coords_into(x, &mut coords[..d]);
        coords[..d]
            .iter()
            .zip(&self.bounds)
            .map(|(c, (lo, hi))| (lo - c).max(0.0) + (c - hi).max(0.0))
            .sum()
    }
}

/// Safety policy evaluation: the input the safety controller would apply
/// at `x`, and whether `x` was inside the safe set (outside it the input
/// is best-effort regulation and is flagged as such).
pub fn safety_input(env: &dyn Environment, set: &SafeSet, x: &[f64]) -> (Vec<f64>, bool) {
    let mut u = vec![0.0; env.input_dim()];
    env.safety_input_into(x, &mut u);
    (u, set.contains(env, x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    ExitedSafeSet,
    ViolatedConstraints,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Violation {
    pub sample: usize,
    pub step: usize,
    pub kind: ViolationKind,
    pub state: Vec<f64>,
}

/// Result of a sampling-based invariance check, emitted as JSON by the
/// verification subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub env_id: String,
    pub n_samples: usize,
    pub horizon: usize,
    pub seed: u64,
    pub violations: Vec<Violation>,
    /// Fraction of samples whose entire rollout stayed certified.
    pub coverage: f64,
}

impl InvarianceReport {
    pub fn certified(&self) -> bool {
        self.n_samples > 0 && self.violations.is_empty()
    }
}

/// Rolls the safety policy forward `horizon` steps from `n_samples` states
/// sampled inside `set`, reporting every exit from the set or from the
/// joint constraints. Deterministic per seed; samples run in parallel with
/// per-sample derived seeds.
pub fn verify_invariance(
    env: &dyn Environment,
    set: &SafeSet,
    n_samples: usize,
    horizon: usize,
    seed: u64,
) -> InvarianceReport {
    let violations: Vec<Violation> = (0..n_samples)
        .into_par_iter()
        .filter_map(|i| {
            let mut sample_rng = rng::stream(seed, "verify-invariance", i as u64);
            let x0 = env.sample_state_in(&set.bounds, &mut sample_rng);
            check_rollout(env, set, &x0, horizon).map(|(step, kind, state)| Violation {
                sample: i,
                step,
                kind,
                state,
            })
        })
        .collect();
    let coverage = if n_samples == 0 {
        0.0
    } else {
        (n_samples - violations.len()) as f64 / n_samples as f64
    };
    InvarianceReport {
        env_id: env.id().to_string(),
        n_samples,
        horizon,
        seed,
        violations,
        coverage,
    }
}

fn check_rollout(
    env: &dyn Environment,
    set: &SafeSet,
    x0: &[f64],
    horizon: usize,
) -> Option<(usize, ViolationKind, Vec<f64>)> {
    let nx = env.state_dim();
    let mut x = x0.to_vec();
    let mut next = vec![0.0; nx];
    let mut u = vec![0.0; env.input_dim()];
    if !set.contains(env, &x) {
        return Some((0, ViolationKind::ExitedSafeSet, x));
    }
    if !env.constraints_ok(&x) {
        return Some((0, ViolationKind::ViolatedConstraints, x));
    }
    for step in 1..=horizon {
        env.safety_input_into(&x, &mut u);
        env.step_into(&x, &u, &mut next);
        std::mem::swap(&mut x, &mut next);
        if !env.constraints_ok(&x) {
            return Some((step, ViolationKind::ViolatedConstraints, x));
        }
        if !set.contains(env, &x) {
            return Some((step, ViolationKind::ExitedSafeSet, x));
        }
    }
    None
}

/// Sampling density for safe-set estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_samples: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { n_samples: 400 }
    }
}

/// Finds the largest box of the monotone family interpolating between the
/// environment's core and maximal candidate boxes whose sampled members
/// all certify under `verify_invariance`, by bisection on the scale.
pub fn estimate_safe_set(
    env: &dyn Environment,
    grid: &GridSpec,
    horizon: usize,
    seed: u64,
) -> Result<SafeSet, SafetyError> {
    let core = env.safe_core_bounds();
    let max = env.safe_max_bounds();
    let family = |t: f64| -> Vec<(f64, f64)> {
        core.iter()
            .zip(&max)
            .map(|((clo, chi), (mlo, mhi))| (clo + t * (mlo - clo), chi + t * (mhi - chi)))
            .collect()
    };
    let certified = |t: f64| -> bool {
        let set = SafeSet {
            env_id: env.id().to_string(),
            bounds: family(t),
        };
        verify_invariance(env, &set, grid.n_samples, horizon, seed).certified()
    };

    if !certified(0.0) {
        return Err(SafetyError::NoInvariantMember {
            env_id: env.id().to_string(),
        });
    }
    if certified(1.0) {
        return Ok(SafeSet {
            env_id: env.id().to_string(),
            bounds: family(1.0),
        });
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..10 {
        let mid = 0.5 * (lo + hi);
        if certified(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SafeSet {
        env_id: env.id().to_string(),
        bounds: family(lo),
    })
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
                length: 60.0,
            }],
            0.4,
        )
    }

    #[test]
    fn membership_follows_the_parametric_predicate() {
        let env = flat_tube();
        let set = SafeSet::shipped(&env);
        // On the centerline at the safety speed.
        assert!(set.contains(&env, &[1.0, 0.5, 0.0, 0.0]));
        // Offset beyond the safe band but inside the walls.
        assert!(!set.contains(&env, &[1.0, 0.5, 0.15, 0.0]));
        // Exactly on the safe boundary: closed set.
        assert!(set.contains(&env, &[1.0, 0.5, 0.12, 0.0]));
    }

    #[test]
    fn empty_verification_reports_zero_coverage() {
        let env = flat_tube();
        let set = SafeSet::shipped(&env);
        let report = verify_invariance(&env, &set, 0, 100, 3);
        assert!(report.violations.is_empty());
        assert_eq!(report.coverage, 0.0);
        assert!(!report.certified());
    }

    #[test]
    fn verification_is_deterministic_per_seed() {
        let env = flat_tube();
        let set = SafeSet::shipped(&env);
        let a = verify_invariance(&env, &set, 50, 60, 9);
        let b = verify_invariance(&env, &set, 50, 60, 9);
        assert_eq!(a.violations.len(), b.violations.len());
        assert_eq!(a.coverage, b.coverage);
    }

    #[test]
    fn inflated_set_reports_violations() {
        let env = flat_tube();
        // An offset band wider than the walls cannot be safe.
        let set = SafeSet::new(
            &env,
            vec![
                (-0.35, 0.35),
                (-0.35, 0.35),
                (-0.5, 0.5),
                (0.3, 0.85),
                (-1.6, 1.6),
            ],
        )
        .unwrap();
        let report = verify_invariance(&env, &set, 200, 50, 4);
        assert!(!report.violations.is_empty());
    }

    #[test]
    fn shipped_tube_set_certifies_on_a_flat_tube() {
        let env = flat_tube();
        let set = SafeSet::shipped(&env);
        let report = verify_invariance(&env, &set, 200, 200, 5);
        assert!(
            report.certified(),
            "violations: {:?}",
            report.violations.first()
        );
    }
}
