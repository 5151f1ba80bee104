//! Run configuration: one JSON document drives every subcommand.
//!
//! All randomness flows from the one global seed through named substreams
//! (environment generation, GP fitting, the trajectory optimizer), so any
//! phase can be re-run in isolation and reproduce its numbers.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::EnvFamily;
use crate::gp::FitConfig;
use crate::planner::{HplConfig, OptBudget};
use crate::strategy::StrategyFitConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{0}")]
    Env(#[from] crate::envs::EnvError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSettings {
    pub horizon: usize,
    pub budget: OptBudget,
    pub step_cap: usize,
}

impl Default for DemoSettings {
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
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub instances: usize,
    pub samples_per_instance: usize,
    pub horizon: usize,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            instances: 10,
            samples_per_instance: 100,
            horizon: 500,
        }
    }
}

/// The experiment configuration: environment family, instance seeds,
/// horizons, thresholds, optimizer budgets, and output locations.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Task instances demonstrated and trained on (indices `0..n`).
    pub n_train_tasks: usize,
    /// Held-out task instances (indices `n_train_tasks..`).
    pub n_eval_tasks: usize,
    /// Which held-out instance `run` executes.
    pub instance_index: u64,
    /// Environment forecast horizon N.
    pub n_forecast: usize,
    /// Strategy prediction horizon T.
    pub t_strategy: usize,
    pub eta: f64,
    pub beta: f64,
    pub d_thresh: f64,
    pub optimizer: OptBudget,
    pub fit: StrategyFitConfig,
    pub step_cap: usize,
    pub input_box_weight: Option<f64>,
    pub demo: DemoSettings,
    pub verify: VerifySettings,
    /// Strategy artifact directory; defaults to `<out_dir>/strategy`.
    pub strategy_dir: Option<PathBuf>,
    /// Flappy only: pipes to survive for task completion.
    pub flappy_target_pipes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::default_for(EnvFamily::Tube)
    }
}

impl RunConfig {
    /// Family defaults mirroring the shipped experiments.
    pub fn default_for(family: EnvFamily) -> Self {
        let base = Self {
            env: family.name().to_string(),
            seed: 0,
            out_dir: PathBuf::from("hpl-out"),
            n_train_tasks: 20,
            n_eval_tasks: 20,
            instance_index: 0,
            n_forecast: 10,
            t_strategy: 5,
            eta: 2.0,
            beta: 0.0,
            d_thresh: 0.7,
            optimizer: OptBudget::default(),
            fit: StrategyFitConfig {
                gp: FitConfig {
                    restarts: 3,
                    iterations: 40,
                    seed: 0,
                },
                max_rows: 300,
            },
            step_cap: 2500,
            input_box_weight: None,
            demo: DemoSettings::default(),
            verify: VerifySettings::default(),
            strategy_dir: None,
            flappy_target_pipes: 200,
        };
        match family {
            EnvFamily::Tube | EnvFamily::TubeSharp => base,
            EnvFamily::Track => Self {
                n_train_tasks: 7,
                n_eval_tasks: 3,
                n_forecast: 15,
                t_strategy: 20,
                step_cap: 3000,
                ..base
            },
            EnvFamily::Flappy => Self {
                n_train_tasks: 15,
                n_eval_tasks: 50,
                n_forecast: 8,
                t_strategy: 10,
                step_cap: 9000,
                demo: DemoSettings {
                    step_cap: 9000,
                    ..DemoSettings::default()
                },
                ..base
            },
        }
    }

    pub fn family(&self) -> Result<EnvFamily, ConfigError> {
        Ok(EnvFamily::parse(&self.env)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let field = |field: &'static str, reason: String| ConfigError::Field { field, reason };
        EnvFamily::parse(&self.env)?;
        if self.n_forecast == 0 {
            return Err(field("n_forecast", "must be positive".into()));
        }
        if self.t_strategy == 0 {
            return Err(field("t_strategy", "must be positive".into()));
        }
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(field("eta", format!("must be finite and >= 0, got {}", self.eta)));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(field("beta", format!("must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.d_thresh > 0.0) {
            return Err(field(
                "d_thresh",
                format!("must be positive, got {}", self.d_thresh),
            ));
        }
        if self.optimizer.population < 2 {
            return Err(field("optimizer.population", "must be at least 2".into()));
        }
        if self.optimizer.elites == 0 {
            return Err(field("optimizer.elites", "must be positive".into()));
        }
        if self.optimizer.iterations == 0 {
            return Err(field("optimizer.iterations", "must be positive".into()));
        }
        if self.fit.gp.restarts == 0 {
            return Err(field("fit.gp.restarts", "must be positive".into()));
        }
        if self.fit.gp.iterations == 0 {
            return Err(field("fit.gp.iterations", "must be positive".into()));
        }
        if self.fit.max_rows == 0 {
            return Err(field("fit.max_rows", "must be positive".into()));
        }
        if self.flappy_target_pipes == 0 {
            return Err(field("flappy_target_pipes", "must be positive".into()));
        }
        if let Some(w) = self.input_box_weight {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(field(
                    "input_box_weight",
                    format!("must be finite and >= 0, got {w}"),
                ));
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let config: Self =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// The controller configuration this run config implies.
    pub fn hpl(&self) -> HplConfig {
        HplConfig {
            n_forecast: self.n_forecast,
            t_strategy: self.t_strategy,
            eta: self.eta,
            beta: self.beta,
            d_thresh: self.d_thresh,
            budget: self.optimizer.clone(),
            step_cap: self.step_cap,
            input_box_weight: self.input_box_weight,
        }
    }

    pub fn strategy_dir(&self) -> PathBuf {
        self.strategy_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("strategy"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_for_every_family() {
        for family in [
            EnvFamily::Tube,
            EnvFamily::TubeSharp,
            EnvFamily::Track,
            EnvFamily::Flappy,
        ] {
            RunConfig::default_for(family).validate().unwrap();
        }
    }

    #[test]
    fn json_round_trip_preserves_the_config() {
        let config = RunConfig::default_for(EnvFamily::Flappy);
        let text = config.to_json();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn validation_names_the_offending_field() {
        let mut config = RunConfig::default();
        config.beta = 1.5;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("beta"));

        let mut config = RunConfig::default();
        config.d_thresh = 0.0;
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("d_thresh"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<RunConfig>("{\"envv\":\"tube\"}").unwrap_err();
        assert!(err.to_string().contains("unknown field"));
    }
}
