//! Task environments: dynamics, descriptors, constraints, projections,
//! task generation, and demonstration corpora.

mod demo;
mod flappy;
mod track;
mod tube;

pub use demo::{demonstrate, DemoConfig, DemoError};
pub use flappy::{FlappyEnv, Pipe};
pub use track::TrackEnv;
pub use tube::{Segment, TubeEnv};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on the constraint-coordinate count of any environment,
/// so hot paths can use stack buffers.
pub const MAX_COORDS: usize = 8;

/// Input-constraint set `U`.
#[derive(Debug, Clone, PartialEq)]
pub enum InputSpace {
    /// Axis-aligned box, one interval per input dimension.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Single binary input in {0, 1}.
    Binary,
}

impl InputSpace {
    pub fn dim(&self) -> usize {
        match self {
            InputSpace::Box { lower, .. } => lower.len(),
            InputSpace::Binary => 1,
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        match self {
            InputSpace::Box { lower, upper } => {
                u.len() == lower.len()
                    && u.iter()
                        .zip(lower.iter().zip(upper))
                        .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
            }
            InputSpace::Binary => u.len() == 1 && (u[0] == 0.0 || u[0] == 1.0),
        }
    }
}

/// A task environment: dynamics `f`, descriptor, joint constraints, the
/// strategy-space projections, and the hooks the safety layer needs.
///
/// Environments are immutable after construction.
pub trait Environment: Send + Sync {
    fn id(&self) -> &str;
    fn family(&self) -> EnvFamily;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Dimension of one descriptor sample.
    fn theta_dim(&self) -> usize;
    fn strategy_state_dim(&self) -> usize;
    fn strategy_input_dim(&self) -> usize;

    fn initial_state(&self) -> Vec<f64>;

    /// Discrete dynamics; writes the successor state into `out`.
    fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]);

    fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim()];
        self.step_into(x, u, &mut out);
        out
    }

    /// Local descriptor at the current state.
    fn theta_into(&self, x: &[f64], out: &mut [f64]);

    /// Descriptor forecast along the parameterized path ahead: writes
    /// `(n + 1) * theta_dim()` values. Returns true when the forecast ran
    /// past the environment end and was padded with the terminal value.
    fn forecast_into(&self, x: &[f64], n: usize, out: &mut Vec<f64>) -> bool;

    fn input_space(&self) -> &InputSpace;

    fn input_ok(&self, u: &[f64]) -> bool {
        self.input_space().contains(u)
    }

    /// Number of scalar constraint coordinates shared by the joint
    /// constraints, the safe set, and the risk blend.
    fn coord_dim(&self) -> usize;

    /// Evaluates the constraint coordinates at `x`.
    fn coords_into(&self, x: &[f64], out: &mut [f64]);

    /// Joint system-and-environment bounds on each constraint coordinate,
    /// evaluated at `x` (some bounds are state-dependent).
    fn env_bounds_into(&self, x: &[f64], out: &mut [(f64, f64)]);

    /// Joint constraint check; closed intervals on every coordinate.
    fn constraints_ok(&self, x: &[f64]) -> bool {
        let d = self.coord_dim();
        let mut coords = [0.0; MAX_COORDS];
        let mut bounds = [(0.0, 0.0); MAX_COORDS];
        self.coords_into(x, &mut coords[..d]);
        self.env_bounds_into(x, &mut bounds[..d]);
        coords[..d]
            .iter()
            .zip(&bounds[..d])
            .all(|(c, (lo, hi))| *c >= *lo && *c <= *hi)
    }

    /// Total constraint violation magnitude at `x`; zero iff feasible.
    fn constraint_violation(&self, x: &[f64]) -> f64 {
        let d = self.coord_dim();
        let mut coords = [0.0; MAX_COORDS];
        let mut bounds = [(0.0, 0.0); MAX_COORDS];
        self.coords_into(x, &mut coords[..d]);
        self.env_bounds_into(x, &mut bounds[..d]);
        coords[..d]
            .iter()
            .zip(&bounds[..d])
            .map(|(c, (lo, hi))| (lo - c).max(0.0) + (c - hi).max(0.0))
            .sum()
    }

    /// Strategy-state projection `g(x, theta)`.
    fn project_state(&self, x: &[f64], out: &mut [f64]);

    /// Strategy-input projection `r(u, theta)`.
    fn project_input(&self, x: &[f64], u: &[f64], out: &mut [f64]);

    /// GP training targets for the row anchored at step `k`: where the
    /// strategy states ended up `t` steps later. Progress-like dimensions
    /// are expressed relative to the anchor state so they generalize
    /// across task instances.
    fn strategy_targets(&self, states: &[Vec<f64>], k: usize, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.strategy_state_dim()];
        self.project_state(&states[k + t], &mut out);
        out
    }

    /// Converts a predicted strategy box (in `strategy_targets`
    /// coordinates) into a box on `g(x)`, anchored at the query state.
    fn anchor_box(&self, _x_k: &[f64], _bounds: &mut [(f64, f64)]) {}

    /// Task target set membership.
    fn task_done(&self, x: &[f64]) -> bool;

    /// Scalar progress measure used by minimum-time demonstrators.
    fn progress(&self, x: &[f64]) -> f64;

    /// Full-knowledge tracking reference for the demonstrator, if the
    /// family is better demonstrated by tracking than by progress alone.
    fn demo_reference(&self, _x: &[f64]) -> Option<f64> {
        None
    }

    /// Operational envelope for demonstrations. Demonstrators plan inside
    /// this tighter region so the stored corpora stay compatible with the
    /// lifted target sets built from the safe set.
    fn demo_envelope_ok(&self, _x: &[f64]) -> bool {
        true
    }

    /// Concrete-type access for game-specific scoring and baselines.
    fn as_flappy(&self) -> Option<&FlappyEnv> {
        None
    }

    /// Safety control policy `pi_e(x, theta)`: a feedback law that keeps
    /// the paired safe set invariant. Total on the state space.
    fn safety_input_into(&self, x: &[f64], out: &mut [f64]);

    /// Samples a state whose constraint coordinates land inside `bounds`,
    /// drawing free coordinates (position along the task) from `rng`.
    fn sample_state_in(&self, bounds: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64>;

    /// Tight seed box for safe-set estimation: a small neighborhood of the
    /// safety behavior that must be invariant for the family to make sense.
    fn safe_core_bounds(&self) -> Vec<(f64, f64)>;

    /// Largest candidate safe-set box the estimation may consider.
    fn safe_max_bounds(&self) -> Vec<(f64, f64)>;

    /// Shipped safe-set bounds for this family, produced offline by
    /// `safety::estimate_safe_set` and pinned here.
    fn shipped_safe_bounds(&self) -> Vec<(f64, f64)>;

    /// Serializes the environment description for run directories.
    fn to_spec_json(&self) -> String;
}

/// Environment family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvFamily {
    Tube,
    /// Curated tubes with a long straight into alternating steep kinks;
    /// used to study risk levels.
    TubeSharp,
    Track,
    Flappy,
}

impl EnvFamily {
    pub fn parse(name: &str) -> Result<Self, EnvError> {
        match name {
            "tube" => Ok(Self::Tube),
            "tube-sharp" => Ok(Self::TubeSharp),
            "track" => Ok(Self::Track),
            "flappy" => Ok(Self::Flappy),
            other => Err(EnvError::UnknownFamily(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Tube => "tube",
            Self::TubeSharp => "tube-sharp",
            Self::Track => "track",
            Self::Flappy => "flappy",
        }
    }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment family {0:?} (expected tube, tube-sharp, track, or flappy)")]
    UnknownFamily(String),
    #[error("malformed environment spec: {0}")]
    Parse(String),
}

/// Generates `n` seeded, reproducible task instances of a family.
pub fn generate_tasks(family: EnvFamily, n: usize, seed: u64) -> Vec<Box<dyn Environment>> {
    (0..n)
        .map(|i| generate_task(family, seed, i as u64))
        .collect()
}

/// Generates the `index`-th task instance of a family under `seed`.
pub fn generate_task(family: EnvFamily, seed: u64, index: u64) -> Box<dyn Environment> {
    match family {
        EnvFamily::Tube => Box::new(TubeEnv::generate(seed, index)),
        EnvFamily::TubeSharp => Box::new(TubeEnv::generate_sharp(seed, index)),
        EnvFamily::Track => Box::new(TrackEnv::generate(seed, index)),
        EnvFamily::Flappy => Box::new(FlappyEnv::generate(seed, index)),
    }
}

/// Restores an environment from `to_spec_json` output.
pub fn env_from_spec_json(text: &str) -> Result<Box<dyn Environment>, EnvError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| EnvError::Parse(e.to_string()))?;
    let family = value
        .get("family")
        .and_then(|f| f.as_str())
        .ok_or_else(|| EnvError::Parse("missing family field".into()))?;
    match EnvFamily::parse(family)? {
        EnvFamily::Tube | EnvFamily::TubeSharp => {
            Ok(Box::new(TubeEnv::from_spec_json(text)?))
        }
        EnvFamily::Track => Ok(Box::new(TrackEnv::from_spec_json(text)?)),
        EnvFamily::Flappy => Ok(Box::new(FlappyEnv::from_spec_json(text)?)),
    }
}
