//! Hierarchical predictive learning (HPL).
//!
//! A controller for solving tasks in environments it has never seen, built
//! from three layers:
//!
//! 1. **Strategies** ([`strategy`]): Gaussian processes ([`gp`]) trained on
//!    stored executions of previous tasks predict, from the current state and
//!    a local environment forecast, where a reduced set of "strategy states"
//!    should be a fixed number of steps ahead. Each prediction becomes a
//!    hyperrectangle sized by the predictive standard deviation.
//! 2. **Target sets** ([`targets`]): accepted strategy boxes are lifted to
//!    full-dimensional terminal sets, blended between a certified safe set
//!    ([`safety`]) and the raw task constraints by a risk level `beta`.
//! 3. **Control** ([`planner`]): a shifting-horizon MPC tracks the list of
//!    recent target sets and hands over to the safety controller whenever no
//!    target set is usable, which keeps the closed loop feasible.
//!
//! Three simulated task families ship in [`envs`]: tube navigation with a
//! double-integrator end effector, curvilinear track racing with a kinematic
//! bicycle, and the Flappy Bird game with exact integer dynamics. The
//! [`cli`] module drives the offline (demonstrate, train) and online (run,
//! eval, verify-safe) phases; see the `hpl` binary and the crate examples.

pub mod cli;
pub mod config;
pub mod envs;
pub mod exec;
pub mod gp;
pub mod planner;
pub mod rng;
pub mod safety;
pub mod strategy;
pub mod targets;

pub use config::RunConfig;
pub use envs::Environment;
pub use exec::Execution;
pub use gp::GpModel;
pub use planner::{ControllerState, PlanResult};
pub use safety::{InvarianceReport, SafeSet};
pub use strategy::{Strategy, StrategySet};
pub use targets::{SetList, TargetSet};
