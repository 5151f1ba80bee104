//! Sampling-based trajectory optimization over input sequences.
//!
//! One optimizer serves every environment family: cross-entropy refinement
//! with Gaussian samples for box-constrained inputs, exhaustive enumeration
//! for binary inputs at small horizons, and cross-entropy over Bernoulli
//! parameters for binary inputs at large horizons.
//!
//! Feasibility is adjudicated by exact constraint checks of the simulated
//! candidate, never by penalty values: a candidate is feasible only if every
//! rolled-out state satisfies the joint constraints and the caller's extra
//! predicate (e.g. terminal-set membership) holds. Among feasible candidates
//! the objective decides; among infeasible ones the total violation decides;
//! ties break toward the lower candidate index, which makes the search
//! deterministic for a fixed seed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{Environment, InputSpace};
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptBudget {
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Enumerate binary inputs exhaustively while `2^H` stays at or below
    /// this bound.
    pub enum_max: usize,
}

impl Default for OptBudget {
    fn default() -> Self {
        Self {
            population: 256,
            elites: 32,
            iterations: 20,
            enum_max: 4096,
        }
    }
}

/// A rolled-out candidate: flattened predicted states `x_{0..=H}` and
/// inputs `u_{0..H-1}`.
pub struct Traj<'a> {
    pub states: &'a [f64],
    pub inputs: &'a [f64],
    pub nx: usize,
    pub nu: usize,
    pub horizon: usize,
}

impl<'a> Traj<'a> {
    #[inline]
    pub fn state(&self, j: usize) -> &'a [f64] {
        &self.states[j * self.nx..(j + 1) * self.nx]
    }

    #[inline]
    pub fn input(&self, j: usize) -> &'a [f64] {
        &self.inputs[j * self.nu..(j + 1) * self.nu]
    }

    #[inline]
    pub fn terminal(&self) -> &'a [f64] {
        self.state(self.horizon)
    }
}

/// Caller-supplied scoring on top of the base constraint checks.
pub struct Evaluator<'a> {
    /// Extra feasibility requirement (terminal membership, envelopes).
    pub extra_feasible: &'a dyn Fn(&Traj) -> bool,
    /// Objective among feasible candidates (minimized).
    pub objective: &'a dyn Fn(&Traj) -> f64,
    /// Extra violation magnitude to rank infeasible candidates.
    pub extra_violation: &'a dyn Fn(&Traj) -> f64,
}

/// A successful optimization: the input sequence, its exact rollout, and
/// the achieved objective.
#[derive(Debug, Clone)]
pub struct OptPlan {
    pub inputs: Vec<f64>,
    pub states: Vec<f64>,
    pub objective: f64,
}

/// Simulates `inputs` from `x0`, writing flattened states into `states`
/// and returning the summed constraint violation of the visited states
/// (excluding `x0`, which the candidate cannot influence).
pub fn rollout_into(
    env: &dyn Environment,
    x0: &[f64],
    inputs: &[f64],
    horizon: usize,
    states: &mut [f64],
) -> f64 {
    let nx = env.state_dim();
    let nu = env.input_dim();
    states[..nx].copy_from_slice(x0);
    let mut violation = 0.0;
    for j in 0..horizon {
        let (head, tail) = states.split_at_mut((j + 1) * nx);
        let prev = &head[j * nx..];
        env.step_into(prev, &inputs[j * nu..(j + 1) * nu], &mut tail[..nx]);
        violation += env.constraint_violation(&tail[..nx]);
    }
    violation
}

#[derive(Clone, Copy, PartialEq)]
struct Key {
    feasible: bool,
    value: f64,
}

impl Key {
    fn better_than(&self, other: &Key) -> bool {
        match (self.feasible, other.feasible) {
            (true, false) => true,
            (false, true) => false,
            _ => self.value < other.value,
        }
    }
}

struct Workspace {
    /// population x (horizon * nu) candidate inputs
    inputs: Vec<f64>,
    keys: Vec<Key>,
    order: Vec<usize>,
    states: Vec<f64>,
    best_inputs: Vec<f64>,
    best_states: Vec<f64>,
}

/// Optimizes an input sequence of length `horizon` from `x0`.
///
/// `warm_start` (flattened inputs of exactly `horizon * nu` values) is both
/// injected verbatim as a candidate and used to center the initial sampling
/// distribution, so a known-feasible plan is never lost.
pub fn optimize(
    env: &dyn Environment,
    x0: &[f64],
    horizon: usize,
    budget: &OptBudget,
    seed: u64,
    warm_start: Option<&[f64]>,
    eval: &Evaluator,
) -> Option<OptPlan> {
    assert!(horizon >= 1, "optimization needs at least one step");
    match env.input_space() {
        InputSpace::Binary => {
            if horizon < usize::BITS as usize && (1usize << horizon) <= budget.enum_max {
                enumerate_binary(env, x0, horizon, eval)
            } else {
                cem_binary(env, x0, horizon, budget, seed, warm_start, eval)
            }
        }
        InputSpace::Box { lower, upper } => {
            cem_box(env, x0, horizon, budget, seed, warm_start, eval, lower, upper)
        }
    }
}

fn evaluate(
    env: &dyn Environment,
    x0: &[f64],
    inputs: &[f64],
    horizon: usize,
    states: &mut [f64],
    eval: &Evaluator,
) -> Key {
    let base_violation = rollout_into(env, x0, inputs, horizon, states);
    let traj = Traj {
        states,
        inputs,
        nx: env.state_dim(),
        nu: env.input_dim(),
        horizon,
    };
    if base_violation == 0.0 && (eval.extra_feasible)(&traj) {
        Key {
            feasible: true,
            value: (eval.objective)(&traj),
        }
    } else {
        Key {
            feasible: false,
            value: base_violation + (eval.extra_violation)(&traj),
        }
    }
}

fn enumerate_binary(
    env: &dyn Environment,
    x0: &[f64],
    horizon: usize,
    eval: &Evaluator,
) -> Option<OptPlan> {
    let nx = env.state_dim();
    let mut states = vec![0.0; (horizon + 1) * nx];
    let mut inputs = vec![0.0; horizon];
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for mask in 0u64..(1u64 << horizon) {
        for (j, slot) in inputs.iter_mut().enumerate() {
            *slot = ((mask >> j) & 1) as f64;
        }
        let key = evaluate(env, x0, &inputs, horizon, &mut states, eval);
        if key.feasible && best.as_ref().map(|(obj, _, _)| key.value < *obj).unwrap_or(true) {
            best = Some((key.value, inputs.clone(), states.clone()));
        }
    }
    best.map(|(objective, inputs, states)| OptPlan {
        inputs,
        states,
        objective,
    })
}

#[allow(clippy::too_many_arguments)]
fn cem_box(
    env: &dyn Environment,
    x0: &[f64],
    horizon: usize,
    budget: &OptBudget,
    seed: u64,
    warm_start: Option<&[f64]>,
    eval: &Evaluator,
    lower: &[f64],
    upper: &[f64],
) -> Option<OptPlan> {
    let nu = env.input_dim();
    let nx = env.state_dim();
    let dims = horizon * nu;
    let population = budget.population.max(4);
    let elites = budget.elites.clamp(1, population);
    let mut rng = rng::stream(seed, "cem-box", 0);

    let mut mean = vec![0.0; dims];
    let mut std = vec![0.0; dims];
    for d in 0..dims {
        let (lo, hi) = (lower[d % nu], upper[d % nu]);
        mean[d] = warm_start.map(|w| w[d]).unwrap_or(0.5 * (lo + hi));
        std[d] = 0.5 * (hi - lo);
    }

    let mut ws = Workspace {
        inputs: vec![0.0; population * dims],
        keys: vec![
            Key {
                feasible: false,
                value: f64::INFINITY
            };
            population
        ],
        order: (0..population).collect(),
        states: vec![0.0; (horizon + 1) * nx],
        best_inputs: vec![0.0; dims],
        best_states: vec![0.0; (horizon + 1) * nx],
    };
    let mut best_key = Key {
        feasible: false,
        value: f64::INFINITY,
    };
    let mut have_best = false;
    let mut stale = 0;

    for iter in 0..budget.iterations.max(1) {
        for c in 0..population {
            let cand = &mut ws.inputs[c * dims..(c + 1) * dims];
            if c == 0 {
                cand.copy_from_slice(&mean);
            } else if c == 1 && iter == 0 && warm_start.is_some() {
                cand.copy_from_slice(warm_start.unwrap());
            } else {
                for d in 0..dims {
                    let (lo, hi) = (lower[d % nu], upper[d % nu]);
                    // Box-Muller normal sample.
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    let normal =
                        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    cand[d] = (mean[d] + std[d] * normal).clamp(lo, hi);
                }
            }
        }
        for c in 0..population {
            let cand = &ws.inputs[c * dims..(c + 1) * dims];
            let key = evaluate(env, x0, cand, horizon, &mut ws.states, eval);
            ws.keys[c] = key;
            if key.better_than(&best_key) {
                best_key = key;
                have_best = true;
                ws.best_inputs.copy_from_slice(cand);
                ws.best_states.copy_from_slice(&ws.states);
                stale = 0;
            }
        }
        stale += 1;
        if best_key.feasible && stale >= 3 {
            break;
        }

        ws.order.sort_by(|a, b| {
            let (ka, kb) = (&ws.keys[*a], &ws.keys[*b]);
            if ka.better_than(kb) {
                std::cmp::Ordering::Less
            } else if kb.better_than(ka) {
                std::cmp::Ordering::Greater
            } else {
                a.cmp(b)
            }
        });
        for d in 0..dims {
            let mut m = 0.0;
            for e in 0..elites {
                m += ws.inputs[ws.order[e] * dims + d];
            }
            m /= elites as f64;
            let mut v = 0.0;
            for e in 0..elites {
                let diff = ws.inputs[ws.order[e] * dims + d] - m;
                v += diff * diff;
            }
            let (lo, hi) = (lower[d % nu], upper[d % nu]);
            mean[d] = m.clamp(lo, hi);
            std[d] = (v / elites as f64).sqrt().max(0.01 * (hi - lo));
        }
    }

    if have_best && best_key.feasible {
        Some(OptPlan {
            inputs: ws.best_inputs,
            states: ws.best_states,
            objective: best_key.value,
        })
    } else {
        None
    }
}

fn cem_binary(
    env: &dyn Environment,
    x0: &[f64],
    horizon: usize,
    budget: &OptBudget,
    seed: u64,
    warm_start: Option<&[f64]>,
    eval: &Evaluator,
) -> Option<OptPlan> {
    let nx = env.state_dim();
    let population = budget.population.max(4);
    let elites = budget.elites.clamp(1, population);
    let mut rng = rng::stream(seed, "cem-binary", 0);
    let mut probs = vec![0.5; horizon];
    if let Some(w) = warm_start {
        for (p, u) in probs.iter_mut().zip(w) {
            *p = (0.8 * u + 0.1).clamp(0.1, 0.9);
        }
    }

    let mut ws = Workspace {
        inputs: vec![0.0; population * horizon],
        keys: vec![
            Key {
                feasible: false,
                value: f64::INFINITY
            };
            population
        ],
        order: (0..population).collect(),
        states: vec![0.0; (horizon + 1) * nx],
        best_inputs: vec![0.0; horizon],
        best_states: vec![0.0; (horizon + 1) * nx],
    };
    let mut best_key = Key {
        feasible: false,
        value: f64::INFINITY,
    };
    let mut have_best = false;
    let mut stale = 0;

    for iter in 0..budget.iterations.max(1) {
        for c in 0..population {
            let cand = &mut ws.inputs[c * horizon..(c + 1) * horizon];
            if c == 0 {
                for (slot, p) in cand.iter_mut().zip(&probs) {
                    *slot = if *p >= 0.5 { 1.0 } else { 0.0 };
                }
            } else if c == 1 && iter == 0 && warm_start.is_some() {
                cand.copy_from_slice(warm_start.unwrap());
            } else {
                for (slot, p) in cand.iter_mut().zip(&probs) {
                    *slot = if rng.gen::<f64>() < *p { 1.0 } else { 0.0 };
                }
            }
        }
        for c in 0..population {
            let cand = &ws.inputs[c * horizon..(c + 1) * horizon];
            let key = evaluate(env, x0, cand, horizon, &mut ws.states, eval);
            ws.keys[c] = key;
            if key.better_than(&best_key) {
                best_key = key;
                have_best = true;
                ws.best_inputs.copy_from_slice(cand);
                ws.best_states.copy_from_slice(&ws.states);
                stale = 0;
            }
        }
        stale += 1;
        if best_key.feasible && stale >= 3 {
            break;
        }

        ws.order.sort_by(|a, b| {
            let (ka, kb) = (&ws.keys[*a], &ws.keys[*b]);
            if ka.better_than(kb) {
                std::cmp::Ordering::Less
            } else if kb.better_than(ka) {
                std::cmp::Ordering::Greater
            } else {
                a.cmp(b)
            }
        });
        for (d, p) in probs.iter_mut().enumerate() {
            let mut m = 0.0;
            for e in 0..elites {
                m += ws.inputs[ws.order[e] * horizon + d];
            }
            *p = (m / elites as f64).clamp(0.03, 0.97);
        }
    }

    if have_best && best_key.feasible {
        Some(OptPlan {
            inputs: ws.best_inputs,
            states: ws.best_states,
            objective: best_key.value,
        })
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvFamily, Segment, TubeEnv};

    fn accept_all<'a>() -> (
        Box<dyn Fn(&Traj) -> bool>,
        Box<dyn Fn(&Traj) -> f64>,
        Box<dyn Fn(&Traj) -> f64>,
    ) {
        (
            Box::new(|_t: &Traj| true),
            Box::new(|t: &Traj| -t.terminal()[0]),
            Box::new(|_t: &Traj| 0.0),
        )
    }

    #[test]
    fn optimizer_is_deterministic_per_seed() {
        let env = TubeEnv::new(
            "flat".into(),
            EnvFamily::Tube,
            vec![Segment {
                slope: 0.0,
                length: 20.0,
            }],
            0.4,
        );
        let (f, o, v) = accept_all();
        let eval = Evaluator {
            extra_feasible: &*f,
            objective: &*o,
            extra_violation: &*v,
        };
        let budget = OptBudget {
            population: 64,
            elites: 8,
            iterations: 6,
            enum_max: 4096,
        };
        let x0 = env.initial_state();
        let a = optimize(&env, &x0, 5, &budget, 42, None, &eval).unwrap();
        let b = optimize(&env, &x0, 5, &budget, 42, None, &eval).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.objective, b.objective);
    }

    #[test]
    fn warm_start_is_preserved_as_a_candidate() {
        let env = TubeEnv::new(
            "flat".into(),
            EnvFamily::Tube,
            vec![Segment {
                slope: 0.0,
                length: 20.0,
            }],
            0.4,
        );
        // Feasibility: terminal q0 velocity within a narrow window that
        // random sampling is unlikely to hit with a single iteration.
        let target = 0.731;
        let feas = move |t: &Traj| (t.terminal()[1] - target).abs() < 1e-9;
        let obj = |_t: &Traj| 0.0;
        let viol = |_t: &Traj| 1.0;
        let eval = Evaluator {
            extra_feasible: &feas,
            objective: &obj,
            extra_violation: &viol,
        };
        // A warm start that achieves the window exactly.
        let x0 = env.initial_state();
        let du = target - x0[1];
        let mut warm = vec![0.0; 5 * 2];
        warm[0] = du / 0.1; // single acceleration step
        let budget = OptBudget {
            population: 16,
            elites: 4,
            iterations: 1,
            enum_max: 16,
        };
        let plan = optimize(&env, &x0, 5, &budget, 7, Some(&warm), &eval).unwrap();
        assert_eq!(plan.inputs, warm);
    }
}
