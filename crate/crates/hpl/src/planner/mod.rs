//! The low-level control layer: a shifting-horizon MPC over the target-set
//! list, horizon selection, safety-mode switching, and the full closed loop.
//!
//! The closed-loop discipline that keeps executions feasible at zero risk:
//! target sets are built inside the safe set, the MPC's terminal constraint
//! is hard, and the previous plan's shifted tail is always injected as a
//! candidate, so a feasible plan can only be "lost" by arriving at its
//! target set, where the safety controller is guaranteed to work.

pub mod opt;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use opt::OptBudget;

use crate::envs::Environment;
use crate::exec::Execution;
use crate::safety::{safety_input, SafeSet};
use crate::strategy::{confidence_gate, Strategy};
use crate::targets::{lift, SetList, TargetSet};

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("horizon {h} is outside 1..={t}")]
    BadHorizon { h: usize, t: usize },
    #[error("slot {slot} is empty; the MPC needs a non-empty terminal set")]
    EmptyTerminalSlot { slot: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    Feasible,
    Infeasible,
}

/// Outcome of one MPC solve.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub status: PlanStatus,
    /// Planned inputs `u_{0..H-1}`; empty when infeasible.
    pub inputs: Vec<Vec<f64>>,
    /// Predicted states `x_{0..=H}` under the planned inputs.
    pub states: Vec<Vec<f64>>,
    pub objective: f64,
    pub horizon: usize,
    /// Worst constraint margin of each predicted state (negative would
    /// mean violation; feasible plans have non-negative slack throughout).
    pub slack: Vec<f64>,
}

impl PlanResult {
    pub fn infeasible(horizon: usize) -> Self {
        Self {
            status: PlanStatus::Infeasible,
            inputs: Vec::new(),
            states: Vec::new(),
            objective: f64::INFINITY,
            horizon,
            slack: Vec::new(),
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.status == PlanStatus::Feasible
    }
}

/// Optional soft penalty coupling planned inputs to the strategy input box.
#[derive(Debug, Clone)]
pub struct InputBoxPenalty {
    pub box_: Vec<(f64, f64)>,
    pub weight: f64,
}

fn state_margin(env: &dyn Environment, x: &[f64]) -> f64 {
    use crate::envs::MAX_COORDS;
    let d = env.coord_dim();
    let mut coords = [0.0; MAX_COORDS];
    let mut bounds = [(0.0, 0.0); MAX_COORDS];
    env.coords_into(x, &mut coords[..d]);
    env.env_bounds_into(x, &mut bounds[..d]);
    coords[..d]
        .iter()
        .zip(&bounds[..d])
        .map(|(c, (lo, hi))| (c - lo).min(hi - c))
        .fold(f64::INFINITY, f64::min)
}

/// Solves the shifting-horizon MPC at a fixed horizon `h`: minimize the
/// summed distances of predicted states to their due (non-empty) target
/// sets, subject to the dynamics, the joint constraints, the input
/// constraints, and hard terminal membership in slot `h - 1`.
///
/// Feasibility of the returned plan is certified by re-simulating it and
/// re-checking every constraint; optimizer budget exhaustion yields an
/// infeasible status, not an error.
#[allow(clippy::too_many_arguments)]
pub fn solve_mpc(
    x_k: &[f64],
    list: &SetList,
    h: usize,
    env: &dyn Environment,
    safe: &SafeSet,
    budget: &OptBudget,
    seed: u64,
    warm_start: Option<&[Vec<f64>]>,
    input_penalty: Option<&InputBoxPenalty>,
) -> Result<PlanResult, PlannerError> {
    let t = list.len();
    if h < 1 || h > t {
        return Err(PlannerError::BadHorizon { h, t });
    }
    let terminal = match list.get(h - 1) {
        TargetSet::Empty => return Err(PlannerError::EmptyTerminalSlot { slot: h - 1 }),
        TargetSet::Box(b) => b.clone(),
    };
    let nu = env.input_dim();
    let nx = env.state_dim();

    // Objective: sum over non-empty slots j < h of the distance from the
    // predicted state due at that slot (x_{j+1}) to the slot's set.
    let tracked: Vec<(usize, crate::targets::TargetBox)> = (0..h)
        .filter_map(|j| list.get(j).as_box().map(|b| (j, b.clone())))
        .collect();
    let objective = |traj: &opt::Traj| -> f64 {
        let mut total = 0.0;
        for (j, set) in &tracked {
            total += set.distance(env, safe, traj.state(j + 1));
        }
        if let Some(p) = input_penalty {
            let mut proj = [0.0; crate::envs::MAX_COORDS];
            let n_su = env.strategy_input_dim();
            for j in 0..traj.horizon {
                env.project_input(traj.state(j), traj.input(j), &mut proj[..n_su]);
                for (v, (lo, hi)) in proj[..n_su].iter().zip(&p.box_) {
                    total += p.weight * ((lo - v).max(0.0) + (v - hi).max(0.0));
                }
            }
        }
        total
    };
    let extra_feasible =
        |traj: &opt::Traj| -> bool { terminal.membership(env, safe, traj.terminal()) };
    let extra_violation =
        |traj: &opt::Traj| -> f64 { terminal.distance(env, safe, traj.terminal()) };
    let eval = opt::Evaluator {
        extra_feasible: &extra_feasible,
        objective: &objective,
        extra_violation: &extra_violation,
    };

    let warm_flat: Option<Vec<f64>> = warm_start.and_then(|w| {
        if w.len() == h {
            Some(w.iter().flat_map(|u| u.iter().copied()).collect())
        } else {
            None
        }
    });

    let plan = match opt::optimize(env, x_k, h, budget, seed, warm_flat.as_deref(), &eval) {
        Some(p) => p,
        None => return Ok(PlanResult::infeasible(h)),
    };

    // Certify the winning candidate independently of the search: re-simulate
    // and re-check everything it claims.
    let mut states = vec![0.0; (h + 1) * nx];
    let base_violation = opt::rollout_into(env, x_k, &plan.inputs, h, &mut states);
    let resim_ok = base_violation == 0.0
        && states
            .chunks(nx)
            .zip(plan.states.chunks(nx))
            .all(|(a, b)| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9))
        && terminal.membership(env, safe, &states[h * nx..])
        && (0..h).all(|j| env.input_ok(&plan.inputs[j * nu..(j + 1) * nu]));
    if !resim_ok {
        return Ok(PlanResult::infeasible(h));
    }

    let states_vec: Vec<Vec<f64>> = states.chunks(nx).map(|c| c.to_vec()).collect();
    let slack = states_vec.iter().map(|x| state_margin(env, x)).collect();
    Ok(PlanResult {
        status: PlanStatus::Feasible,
        inputs: plan.inputs.chunks(nu).map(|c| c.to_vec()).collect(),
        states: states_vec,
        objective: plan.objective,
        horizon: h,
        slack,
    })
}

/// The shifting-horizon rule, generic over the per-horizon solver: scan
/// horizons in decreasing order, skip empty terminal slots, and return the
/// first (largest) horizon whose solve succeeds.
pub fn select_horizon_with<R>(
    list: &SetList,
    mut solve: impl FnMut(usize) -> Option<R>,
) -> Option<(usize, R)> {
    for s in (1..=list.len()).rev() {
        if list.get(s - 1).is_empty() {
            continue;
        }
        if let Some(result) = solve(s) {
            return Some((s, result));
        }
    }
    None
}

/// The shifting-horizon rule over real MPC solves. `warm_tail` is the
/// shifted remainder of the previously applied plan; at the matching
/// horizon it is injected verbatim, which makes a previously certified
/// plan impossible to lose.
#[allow(clippy::too_many_arguments)]
pub fn select_horizon(
    x_k: &[f64],
    list: &SetList,
    env: &dyn Environment,
    safe: &SafeSet,
    budget: &OptBudget,
    seed: u64,
    warm_tail: Option<&[Vec<f64>]>,
    input_penalty: Option<&InputBoxPenalty>,
) -> Option<(usize, PlanResult)> {
    select_horizon_with(list, |s| {
        let solve_seed = crate::rng::sub_seed(seed, "mpc-solve", s as u64);
        match solve_mpc(
            x_k,
            list,
            s,
            env,
            safe,
            budget,
            solve_seed,
            warm_tail,
            input_penalty,
        ) {
            Ok(plan) if plan.is_feasible() => Some(plan),
            _ => None,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Mpc,
    SafetyControl,
}

/// Controller configuration for one task family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HplConfig {
    pub n_forecast: usize,
    pub t_strategy: usize,
    pub eta: f64,
    pub beta: f64,
    pub d_thresh: f64,
    pub budget: OptBudget,
    pub step_cap: usize,
    /// Weight of the optional soft penalty tying planned inputs to the
    /// strategy input box; off by default.
    pub input_box_weight: Option<f64>,
}

/// Mutable controller state threaded through the closed loop.
#[derive(Debug)]
pub struct ControllerState {
    pub list: SetList,
    pub mode: Mode,
    pub k: usize,
    pub seed: u64,
    /// Shifted remainder of the last applied plan.
    tail: Vec<Vec<f64>>,
}

impl ControllerState {
    pub fn new(t_strategy: usize, seed: u64) -> Self {
        Self {
            list: SetList::new(t_strategy),
            mode: Mode::SafetyControl,
            k: 0,
            seed,
            tail: Vec::new(),
        }
    }
}

/// One line of the per-step JSON log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub k: usize,
    pub mode: Mode,
    pub horizon: Option<usize>,
    pub confidence: Vec<f64>,
    pub gate_accepted: bool,
    /// Anchored strategy-state box bounds when a target set was created.
    pub target_box: Option<Vec<(f64, f64)>>,
    pub target_empty: bool,
    pub due_step: usize,
    pub beta: f64,
    pub input: Vec<f64>,
    pub objective: Option<f64>,
    /// True when non-empty slots existed but no horizon was feasible and
    /// the safety input was applied as a fallback.
    pub fallback: bool,
    pub padded_forecast: bool,
    pub wall_ms: f64,
}

/// One step of the HPL control policy: forecast, evaluate the strategy,
/// gate it, lift it (or record an empty set), shift the set list, then
/// either solve the shifting-horizon MPC or hand over to the safety
/// controller. The returned input always satisfies the input constraints.
pub fn hpl_step(
    cs: &mut ControllerState,
    x_k: &[f64],
    env: &dyn Environment,
    strategy: &Strategy,
    safe: &SafeSet,
    cfg: &HplConfig,
) -> (Vec<f64>, StepLog) {
    let start = Instant::now();
    let mut forecast = Vec::new();
    let padded = env.forecast_into(x_k, cfg.n_forecast, &mut forecast);

    let evaluation = strategy.evaluate(x_k, &forecast, cfg.eta);
    let (confidence, accepted, target, box_log, input_box) = match evaluation {
        Ok(set) => {
            let accepted = confidence_gate(&set.confidence, cfg.d_thresh);
            if accepted {
                let mut anchored = set.state_box.clone();
                env.anchor_box(x_k, &mut anchored);
                let target = lift(
                    anchored.clone(),
                    cfg.beta,
                    cs.k,
                    cs.k + cfg.t_strategy,
                )
                .expect("beta validated by config");
                (
                    set.confidence.clone(),
                    true,
                    target,
                    Some(anchored),
                    Some(set.input_box.clone()),
                )
            } else {
                (set.confidence.clone(), false, TargetSet::Empty, None, None)
            }
        }
        Err(_) => (Vec::new(), false, TargetSet::Empty, None, None),
    };
    cs.list.push(target);

    let penalty = match (cfg.input_box_weight, input_box) {
        (Some(weight), Some(box_)) if weight > 0.0 => Some(InputBoxPenalty { box_, weight }),
        _ => None,
    };

    let mut horizon = None;
    let mut objective = None;
    let mut fallback = false;
    let input;
    if cs.list.all_empty() {
        cs.mode = Mode::SafetyControl;
        cs.tail.clear();
        input = safety_input(env, safe, x_k).0;
    } else {
        let step_seed = crate::rng::sub_seed(cs.seed, "hpl-step", cs.k as u64);
        let tail = if cs.tail.is_empty() {
            None
        } else {
            Some(cs.tail.as_slice())
        };
        match select_horizon(
            x_k,
            &cs.list,
            env,
            safe,
            &cfg.budget,
            step_seed,
            tail,
            penalty.as_ref(),
        ) {
            Some((h, plan)) => {
                cs.mode = Mode::Mpc;
                horizon = Some(h);
                objective = Some(plan.objective);
                input = plan.inputs[0].clone();
                cs.tail = plan.inputs[1..].to_vec();
            }
            None => {
                // Non-empty slots but nothing reachable: best effort is the
                // safety input. The mode flag still tracks the list state.
                cs.mode = Mode::Mpc;
                cs.tail.clear();
                fallback = true;
                input = safety_input(env, safe, x_k).0;
            }
        }
    }

    let log = StepLog {
        k: cs.k,
        mode: cs.mode,
        horizon,
        confidence,
        gate_accepted: accepted,
        target_box: box_log,
        target_empty: !accepted,
        due_step: cs.k + cfg.t_strategy,
        beta: cfg.beta,
        input: input.clone(),
        objective,
        fallback,
        padded_forecast: padded,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    cs.k += 1;
    (input, log)
}

/// Runs the full HPL policy on a task until the target set is reached, a
/// constraint fails (the run stops and is flagged), or the step cap hits.
pub fn run_task(
    env: &dyn Environment,
    strategy: &Strategy,
    safe: &SafeSet,
    cfg: &HplConfig,
    seed: u64,
) -> (Execution, Vec<StepLog>) {
    let mut cs = ControllerState::new(cfg.t_strategy, seed);
    let mut x = env.initial_state();
    let mut states = vec![x.clone()];
    let mut inputs = Vec::new();
    let mut logs = Vec::new();
    let mut complete = false;
    for _ in 0..cfg.step_cap {
        if env.task_done(&x) {
            complete = true;
            break;
        }
        let (u, log) = hpl_step(&mut cs, &x, env, strategy, safe, cfg);
        x = env.step(&x, &u);
        inputs.push(u);
        states.push(x.clone());
        logs.push(log);
        if !env.constraints_ok(&x) {
            break;
        }
    }
    complete = complete || env.task_done(&x);
    let exec = Execution {
        env_id: env.id().to_string(),
        states,
        inputs,
        states_feasible: false,
        inputs_feasible: false,
        reached_target: false,
        complete,
    }
    .checked_against(env);
    (exec, logs)
}

/// Runs the safety controller alone; the baseline every comparison leans
/// on, and the behavior HPL degenerates to when every strategy is gated.
pub fn run_safety_only(env: &dyn Environment, step_cap: usize) -> Execution {
    let mut x = env.initial_state();
    let mut states = vec![x.clone()];
    let mut inputs = Vec::new();
    let mut u = vec![0.0; env.input_dim()];
    let mut complete = false;
    for _ in 0..step_cap {
        if env.task_done(&x) {
            complete = true;
            break;
        }
        env.safety_input_into(&x, &mut u);
        x = env.step(&x, &u);
        inputs.push(u.clone());
        states.push(x.clone());
        if !env.constraints_ok(&x) {
            break;
        }
    }
    complete = complete || env.task_done(&x);
    Execution {
        env_id: env.id().to_string(),
        states,
        inputs,
        states_feasible: false,
        inputs_feasible: false,
        reached_target: false,
        complete,
    }
    .checked_against(env)
}

/// Runs the center-tracking baseline controller on a Flappy Bird task.
pub fn run_flappy_baseline(
    env: &crate::envs::FlappyEnv,
    horizon: usize,
    step_cap: usize,
) -> Execution {
    use crate::envs::Environment as _;
    let mut x = env.initial_state();
    let mut states = vec![x.clone()];
    let mut inputs = Vec::new();
    let mut complete = false;
    for _ in 0..step_cap {
        if env.task_done(&x) {
            complete = true;
            break;
        }
        let u = vec![env.baseline_input(&x, horizon)];
        x = env.step(&x, &u);
        inputs.push(u);
        states.push(x.clone());
        if !env.constraints_ok(&x) {
            break;
        }
    }
    complete = complete || env.task_done(&x);
    Execution {
        env_id: env.id().to_string(),
        states,
        inputs,
        states_feasible: false,
        inputs_feasible: false,
        reached_target: false,
        complete,
    }
    .checked_against(env)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{EnvFamily, Segment, TubeEnv};
    use crate::targets::lift;

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

    fn reachable_box(env: &TubeEnv, x: &[f64], h: usize) -> crate::targets::TargetSet {
        // A generous box around where the current speed carries the system.
        let s0 = env.arc_length(x[0]);
        let ds = x[1] * 0.1 * h as f64;
        lift(
            vec![(s0 + ds - 0.5, s0 + ds + 0.5), (-0.1, 0.1)],
            0.0,
            0,
            h,
        )
        .unwrap()
    }

    #[test]
    fn mpc_reaches_a_reachable_box_and_rejects_an_unreachable_one() {
        let env = flat_tube();
        let safe = SafeSet::shipped(&env);
        let x = env.initial_state();
        let mut list = SetList::new(5);
        for _ in 0..4 {
            list.push(TargetSet::Empty);
        }
        list.push(reachable_box(&env, &x, 5));
        let budget = OptBudget {
            population: 128,
            elites: 16,
            iterations: 10,
            enum_max: 4096,
        };
        let plan = solve_mpc(&x, &list, 5, &env, &safe, &budget, 3, None, None).unwrap();
        assert!(plan.is_feasible());
        assert_eq!(plan.inputs.len(), 5);
        assert!(plan.slack.iter().all(|s| *s >= 0.0));

        // A target far outside the 5-step reachable set.
        let mut list = SetList::new(5);
        for _ in 0..4 {
            list.push(TargetSet::Empty);
        }
        list.push(lift(vec![(30.0, 31.0), (-0.1, 0.1)], 0.0, 0, 5).unwrap());
        let plan = solve_mpc(&x, &list, 5, &env, &safe, &budget, 3, None, None).unwrap();
        assert!(!plan.is_feasible());
    }

    #[test]
    fn empty_terminal_slot_is_an_error() {
        let env = flat_tube();
        let safe = SafeSet::shipped(&env);
        let list = SetList::new(3);
        let budget = OptBudget::default();
        assert!(matches!(
            solve_mpc(
                &env.initial_state(),
                &list,
                3,
                &env,
                &safe,
                &budget,
                0,
                None,
                None
            ),
            Err(PlannerError::EmptyTerminalSlot { .. })
        ));
    }

    #[test]
    fn horizon_rule_takes_the_largest_feasible_slot() {
        let mut list = SetList::new(6);
        // Non-empty slots at indices 1 and 4 (horizons 2 and 5).
        for j in 0..6 {
            let set = if j == 1 || j == 4 {
                lift(vec![(0.0, 1.0)], 0.0, 0, j).unwrap()
            } else {
                TargetSet::Empty
            };
            list.push(set);
        }
        // Both feasible: picks 5.
        let got = select_horizon_with(&list, |s| Some(s));
        assert_eq!(got.map(|(h, _)| h), Some(5));
        // Only horizon 2 feasible: picks 2.
        let got = select_horizon_with(&list, |s| if s == 2 { Some(s) } else { None });
        assert_eq!(got.map(|(h, _)| h), Some(2));
        // All empty: none.
        let empty = SetList::new(6);
        assert!(select_horizon_with(&empty, |s| Some(s)).is_none());
    }

    #[test]
    fn zero_step_cap_yields_an_empty_incomplete_execution() {
        let env = flat_tube();
        let exec = run_safety_only(&env, 0);
        assert_eq!(exec.states.len(), 1);
        assert!(exec.inputs.is_empty());
        assert!(!exec.complete);
    }

    #[test]
    fn safety_only_tube_run_is_feasible_and_completes() {
        let env = TubeEnv::generate(21, 0);
        let exec = run_safety_only(&env, 3000);
        assert!(exec.complete, "safety-only run hit the step cap");
        assert!(exec.states_feasible);
        assert!(exec.inputs_feasible);
        assert!(exec.reached_target);
    }
}
