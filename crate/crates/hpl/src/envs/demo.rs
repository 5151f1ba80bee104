//! Offline demonstrators: near-minimum-time executions produced by
//! receding long-horizon optimization with full environment knowledge.
//!
//! Demonstrations stand in for an expert: they obey the task constraints
//! plus a tighter operational envelope, so the strategies learned from
//! them stay compatible with the lifted target sets used online.

use thiserror::Error;

use super::Environment;
use crate::exec::Execution;
use crate::planner::opt::{self, Evaluator, OptBudget};
use crate::rng;

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("demonstrator stalled on {env_id} at step {step}: no feasible plan")]
    Stalled { env_id: String, step: usize },
    #[error("demonstrator produced an infeasible execution on {env_id}")]
    Infeasible { env_id: String },
    #[error("demonstrator hit the step cap ({cap}) on {env_id}")]
    StepCap { env_id: String, cap: usize },
}

#[derive(Debug, Clone)]
pub struct DemoConfig {
    /// Receding optimization horizon.
    pub horizon: usize,
    pub budget: OptBudget,
    pub step_cap: usize,
    pub seed: u64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            budget: OptBudget {
                population: 96,
                elites: 12,
                iterations: 8,
                enum_max: 4096,
            },
            step_cap: 4000,
            seed: 0,
        }
    }
}

/// Produces a feasible, near-minimum-time execution of `env`.
///
/// Box-input families run a receding cross-entropy optimization that
/// maximizes terminal progress inside the demonstration envelope; the
/// binary-input family tracks its full-knowledge reference instead.
pub fn demonstrate(env: &dyn Environment, config: &DemoConfig) -> Result<Execution, DemoError> {
    let exec = if env.demo_reference(&env.initial_state()).is_some() {
        demonstrate_tracking(env, config)?
    } else {
        demonstrate_progress(env, config)?
    };
    if !exec.is_feasible() {
        return Err(DemoError::Infeasible {
            env_id: env.id().to_string(),
        });
    }
    Ok(exec)
}

fn demonstrate_progress(
    env: &dyn Environment,
    config: &DemoConfig,
) -> Result<Execution, DemoError> {
    let h = config.horizon;
    let nu = env.input_dim();
    let extra_feasible = |traj: &opt::Traj| -> bool {
        (0..=traj.horizon).all(|j| env.demo_envelope_ok(traj.state(j)))
    };
    let objective = |traj: &opt::Traj| -> f64 { -env.progress(traj.terminal()) };
    let extra_violation = |traj: &opt::Traj| -> f64 {
        (0..=traj.horizon)
            .filter(|j| !env.demo_envelope_ok(traj.state(*j)))
            .count() as f64
    };
    let eval = Evaluator {
        extra_feasible: &extra_feasible,
        objective: &objective,
        extra_violation: &extra_violation,
    };

    let mut x = env.initial_state();
    let mut states = vec![x.clone()];
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut warm: Option<Vec<f64>> = None;
    let mut complete = false;
    for k in 0..config.step_cap {
        if env.task_done(&x) {
            complete = true;
            break;
        }
        let seed = rng::sub_seed(config.seed, "demo-step", k as u64);
        let u = match opt::optimize(env, &x, h, &config.budget, seed, warm.as_deref(), &eval) {
            Some(plan) => {
                let u = plan.inputs[..nu].to_vec();
                // Shift the plan one step, repeating its last input.
                let mut next_warm = plan.inputs[nu..].to_vec();
                next_warm.extend_from_slice(&plan.inputs[(h - 1) * nu..]);
                warm = Some(next_warm);
                u
            }
            None => {
                // A hard spot for the optimizer: fall back to the safety
                // law for one step and retry from there.
                warm = None;
                let mut u = vec![0.0; nu];
                env.safety_input_into(&x, &mut u);
                u
            }
        };
        x = env.step(&x, &u);
        inputs.push(u);
        states.push(x.clone());
    }
    if !complete {
        return Err(DemoError::StepCap {
            env_id: env.id().to_string(),
            cap: config.step_cap,
        });
    }
    Ok(Execution {
        env_id: env.id().to_string(),
        states,
        inputs,
        states_feasible: false,
        inputs_feasible: false,
        reached_target: false,
        complete: true,
    }
    .checked_against(env))
}

fn demonstrate_tracking(
    env: &dyn Environment,
    config: &DemoConfig,
) -> Result<Execution, DemoError> {
    let flappy = env
        .as_flappy()
        .expect("tracking demonstrations are only defined for the game family");
    let mut x = env.initial_state();
    let mut states = vec![x.clone()];
    let mut inputs = Vec::new();
    let mut complete = false;
    for k in 0..config.step_cap {
        if env.task_done(&x) {
            complete = true;
            break;
        }
        let u = vec![flappy.demo_input(&x, 10)];
        x = env.step(&x, &u);
        inputs.push(u);
        states.push(x.clone());
        if !env.constraints_ok(&x) {
            return Err(DemoError::Stalled {
                env_id: env.id().to_string(),
                step: k,
            });
        }
    }
    if !complete {
        return Err(DemoError::StepCap {
            env_id: env.id().to_string(),
            cap: config.step_cap,
        });
    }
    Ok(Execution {
        env_id: env.id().to_string(),
        states,
        inputs,
        states_feasible: false,
        inputs_feasible: false,
        reached_target: false,
        complete: true,
    }
    .checked_against(env))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{FlappyEnv, TubeEnv};

    #[test]
    fn tube_demonstration_is_feasible_and_faster_than_safety() {
        let env = TubeEnv::generate(31, 0);
        let demo = demonstrate(&env, &DemoConfig::default()).unwrap();
        assert!(demo.is_feasible());
        let safety = crate::planner::run_safety_only(&env, 4000);
        assert!(
            demo.duration() < safety.duration(),
            "demo {} vs safety {}",
            demo.duration(),
            safety.duration()
        );
    }

    #[test]
    fn flappy_demonstration_survives_its_task() {
        let env = FlappyEnv::generate_with_target(31, 0, 12);
        let demo = demonstrate(&env, &DemoConfig::default()).unwrap();
        assert!(demo.is_feasible());
        assert!(demo.complete);
    }
}
