//! Experiment driver: the offline phase (demonstrate, train), the online
//! phase (run), benchmarking (eval), and safe-set certification
//! (verify-safe), each as a subcommand of the `hpl` binary.
//!
//! Every command is deterministic for a given config and seed; summaries
//! deliberately contain no wall-clock data so identical invocations write
//! identical JSON.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::envs::{self, DemoConfig, EnvFamily, Environment};
use crate::exec::Execution;
use crate::planner::{self, Mode, StepLog};
use crate::rng;
use crate::safety::{self, InvarianceReport, SafeSet};
use crate::strategy::{self, Strategy};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("runtime failure: {0}")]
    Runtime(String),
}

impl CliError {
    /// Process exit code: 2 for configuration problems, 3 for runtime
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn io(context: &str, source: std::io::Error) -> Self {
        CliError::Runtime(format!("{context}: {source}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    DemoGen,
    Train,
    Run,
    Eval,
    VerifySafe,
}

/// Parsed command line, before the config file and flags are merged.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub env: Option<String>,
}

/// Merges the config file (if any) with the command-line overrides.
pub fn resolve_config(inv: &Invocation) -> Result<RunConfig, CliError> {
    let mut config = match (&inv.config, &inv.env) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(env)) => RunConfig::default_for(EnvFamily::parse(env).map_err(ConfigError::Env)?),
        (None, None) => {
            return Err(CliError::Config(ConfigError::Field {
                field: "env",
                reason: "pass --env {tube,track,flappy} or --config PATH".into(),
            }))
        }
    };
    if let Some(env) = &inv.env {
        config.env = env.clone();
    }
    if let Some(seed) = inv.seed {
        config.seed = seed;
        config.fit.gp.seed = seed;
    }
    if let Some(out) = &inv.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Runs one subcommand end to end, printing a one-line outcome.
pub fn execute(inv: &Invocation) -> Result<(), CliError> {
    let config = resolve_config(inv)?;
    match inv.command {
        Command::DemoGen => {
            let summary = cmd_demo_gen(&config)?;
            println!(
                "demo-gen: {}/{} demonstrations in {}",
                summary.produced,
                summary.requested,
                config.out_dir.join("demos").display()
            );
        }
        Command::Train => {
            let summary = cmd_train(&config)?;
            println!(
                "train: {} rows from {} executions, strategy {} in {}",
                summary.dataset_rows,
                summary.executions_used,
                &summary.strategy_hash[..12],
                config.strategy_dir().display()
            );
        }
        Command::Run => {
            let summary = cmd_run(&config)?;
            println!(
                "run: task {} {} in {} steps ({} violations), logs in {}",
                summary.env_id,
                if summary.completed { "completed" } else { "incomplete" },
                summary.steps,
                summary.violations,
                config.out_dir.join("runs").display()
            );
        }
        Command::Eval => {
            let summary = cmd_eval(&config)?;
            println!(
                "eval: {} tasks, table in {}",
                summary.rows.len(),
                config.out_dir.join("eval").display()
            );
        }
        Command::VerifySafe => {
            let summary = cmd_verify_safe(&config)?;
            println!(
                "verify-safe: {} samples x {} steps on {} instances, {} violations",
                summary.total_samples,
                summary.horizon,
                summary.instances,
                summary.total_violations
            );
        }
    }
    Ok(())
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::io(&format!("creating {}", path.display()), e))
}

fn write_string(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::io(&format!("writing {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_string(
        path,
        &serde_json::to_string_pretty(value).expect("summary serialization"),
    )
}

fn family_of(config: &RunConfig) -> Result<EnvFamily, CliError> {
    Ok(config.family()?)
}

fn seconds_per_step(family: EnvFamily) -> Option<f64> {
    match family {
        EnvFamily::Tube | EnvFamily::TubeSharp => Some(0.1),
        EnvFamily::Track => Some(0.1),
        EnvFamily::Flappy => None,
    }
}

fn generate_instance(config: &RunConfig, family: EnvFamily, index: u64) -> Box<dyn Environment> {
    match family {
        EnvFamily::Flappy => Box::new(crate::envs::FlappyEnv::generate_with_target(
            config.seed,
            index,
            config.flappy_target_pipes,
        )),
        _ => envs::generate_task(family, config.seed, index),
    }
}

fn count_violations(env: &dyn Environment, exec: &Execution) -> usize {
    exec.states.iter().filter(|x| !env.constraints_ok(x)).count()
        + exec.inputs.iter().filter(|u| !env.input_ok(u)).count()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoGenSummary {
    pub requested: usize,
    pub produced: usize,
    pub skipped: Vec<String>,
    pub durations: Vec<usize>,
}

/// Demonstrates every training instance and stores the corpus on disk.
pub fn cmd_demo_gen(config: &RunConfig) -> Result<DemoGenSummary, CliError> {
    let family = family_of(config)?;
    let dir = config.out_dir.join("demos");
    ensure_dir(&dir)?;

    let results: Vec<Result<(usize, Execution, String), String>> = (0..config.n_train_tasks)
        .into_par_iter()
        .map(|i| {
            let env = generate_instance(config, family, i as u64);
            let demo_config = DemoConfig {
                horizon: config.demo.horizon,
                budget: config.demo.budget.clone(),
                step_cap: config.demo.step_cap,
                seed: rng::sub_seed(config.seed, "demo", i as u64),
            };
            match envs::demonstrate(env.as_ref(), &demo_config) {
                Ok(exec) => Ok((i, exec, env.to_spec_json())),
                Err(e) => Err(format!("task {i}: {e}")),
            }
        })
        .collect();

    let mut summary = DemoGenSummary {
        requested: config.n_train_tasks,
        produced: 0,
        skipped: Vec::new(),
        durations: Vec::new(),
    };
    for result in results {
        match result {
            Ok((i, exec, env_json)) => {
                write_string(&dir.join(format!("task_{i}.env.json")), &env_json)?;
                exec.write_csv(&dir.join(format!("task_{i}.csv")))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                summary.produced += 1;
                summary.durations.push(exec.duration());
            }
            Err(diag) => summary.skipped.push(diag),
        }
    }
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub dataset_rows: usize,
    pub executions_used: usize,
    pub skipped: Vec<String>,
    pub strategy_hash: String,
}

/// Builds the GP dataset from the stored corpus and trains the strategy.
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary, CliError> {
    let demos_dir = config.out_dir.join("demos");
    let mut envs_store: Vec<Box<dyn Environment>> = Vec::new();
    let mut execs: Vec<Execution> = Vec::new();
    for i in 0..config.n_train_tasks {
        let env_path = demos_dir.join(format!("task_{i}.env.json"));
        let csv_path = demos_dir.join(format!("task_{i}.csv"));
        if !env_path.exists() || !csv_path.exists() {
            continue; // demonstration was skipped
        }
        let env_text = std::fs::read_to_string(&env_path)
            .map_err(|e| CliError::io(&format!("reading {}", env_path.display()), e))?;
        envs_store.push(
            envs::env_from_spec_json(&env_text).map_err(|e| CliError::Runtime(e.to_string()))?,
        );
        execs.push(Execution::read_csv(&csv_path).map_err(|e| CliError::Runtime(e.to_string()))?);
    }
    if execs.is_empty() {
        return Err(CliError::Runtime(format!(
            "no stored demonstrations under {} (run demo-gen first)",
            demos_dir.display()
        )));
    }

    let corpus: Vec<(&dyn Environment, &Execution)> = envs_store
        .iter()
        .map(|e| e.as_ref() as &dyn Environment)
        .zip(execs.iter())
        .collect();
    let (dataset, report) =
        strategy::build_dataset(&corpus, config.n_forecast, config.t_strategy)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    let strategy = strategy::train_strategy(&dataset, &config.fit)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let dir = config.strategy_dir();
    ensure_dir(&dir)?;
    write_string(&dir.join("dataset.csv"), &dataset.to_csv())?;
    strategy
        .save_dir(&dir)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let hash = strategy.content_hash();
    write_string(&dir.join("hash.txt"), &hash)?;

    let summary = TrainSummary {
        dataset_rows: dataset.len(),
        executions_used: report.used,
        skipped: report.skipped,
        strategy_hash: hash,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub env_id: String,
    pub steps: usize,
    pub seconds: Option<f64>,
    pub completed: bool,
    pub violations: usize,
    pub safety_mode_steps: usize,
    pub fallback_steps: usize,
    pub score: Option<usize>,
    pub strategy_hash: String,
    pub seed: u64,
}

fn write_run_artifacts(
    config: &RunConfig,
    dir: &Path,
    tag: &str,
    exec: &Execution,
    logs: &[StepLog],
    hash: &str,
) -> Result<(), CliError> {
    ensure_dir(dir)?;
    exec.write_csv(&dir.join(format!("{tag}.csv")))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut lines = String::new();
    for log in logs {
        lines.push_str(&serde_json::to_string(log).expect("step log serialization"));
        lines.push('\n');
    }
    write_string(&dir.join(format!("{tag}.steps.jsonl")), &lines)?;
    write_string(&dir.join("config.json"), &config.to_json())?;
    write_string(&dir.join("seed.txt"), &config.seed.to_string())?;
    write_string(&dir.join("strategy_hash.txt"), hash)?;
    Ok(())
}

/// Runs the HPL policy on one held-out instance and logs everything.
pub fn cmd_run(config: &RunConfig) -> Result<RunSummary, CliError> {
    let family = family_of(config)?;
    let strategy = Strategy::load_dir(&config.strategy_dir())
        .map_err(|e| CliError::Runtime(format!("loading strategy: {e}")))?;
    let hash = strategy.content_hash();
    let instance = config.n_train_tasks as u64 + config.instance_index;
    let env = generate_instance(config, family, instance);
    let safe = SafeSet::shipped(env.as_ref());
    let run_seed = rng::sub_seed(config.seed, "run", instance);
    let (exec, logs) = planner::run_task(env.as_ref(), &strategy, &safe, &config.hpl(), run_seed);

    let dir = config.out_dir.join("runs");
    let tag = format!("run_{}", config.instance_index);
    write_run_artifacts(config, &dir, &tag, &exec, &logs, &hash)?;

    let summary = RunSummary {
        env_id: env.id().to_string(),
        steps: exec.duration(),
        seconds: seconds_per_step(family).map(|dt| dt * exec.duration() as f64),
        completed: exec.complete,
        violations: count_violations(env.as_ref(), &exec),
        safety_mode_steps: logs.iter().filter(|l| l.mode == Mode::SafetyControl).count(),
        fallback_steps: logs.iter().filter(|l| l.fallback).count(),
        score: env.as_flappy().map(|f| f.score(exec.states.last().unwrap())),
        strategy_hash: hash,
        seed: config.seed,
    };
    write_json(&dir.join(format!("{tag}.summary.json")), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub env_id: String,
    pub hpl_steps: usize,
    pub hpl_completed: bool,
    pub hpl_violations: usize,
    pub hpl_safety_mode_steps: usize,
    pub safety_steps: usize,
    pub safety_completed: bool,
    pub demo_steps: Option<usize>,
    pub hpl_score: Option<usize>,
    pub baseline_score: Option<usize>,
    pub safety_score: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreStats {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
}

impl ScoreStats {
    fn from(values: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.collect();
        v.sort_by(f64::total_cmp);
        let n = v.len().max(1);
        Self {
            mean: v.iter().sum::<f64>() / n as f64,
            median: if v.is_empty() {
                0.0
            } else if v.len() % 2 == 1 {
                v[v.len() / 2]
            } else {
                0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
            },
            min: v.first().copied().unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<EvalRow>,
    /// Tube/track: mean task durations in steps.
    pub mean_hpl_steps: Option<f64>,
    pub mean_safety_steps: Option<f64>,
    pub mean_demo_steps: Option<f64>,
    /// Flappy: score statistics per controller.
    pub hpl_scores: Option<ScoreStats>,
    pub baseline_scores: Option<ScoreStats>,
    pub total_violations: usize,
}

/// Benchmarks HPL against the safety controller and the demonstrator (or
/// the center-tracking baseline for the game family) on held-out tasks.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalSummary, CliError> {
    let family = family_of(config)?;
    let strategy = Strategy::load_dir(&config.strategy_dir())
        .map_err(|e| CliError::Runtime(format!("loading strategy: {e}")))?;
    let hpl_config = config.hpl();

    let rows: Vec<EvalRow> = (0..config.n_eval_tasks)
        .into_par_iter()
        .map(|i| {
            let instance = (config.n_train_tasks + i) as u64;
            let env = generate_instance(config, family, instance);
            let safe = SafeSet::shipped(env.as_ref());
            let run_seed = rng::sub_seed(config.seed, "run", instance);
            let (hpl_exec, logs) =
                planner::run_task(env.as_ref(), &strategy, &safe, &hpl_config, run_seed);
            let safety_exec = planner::run_safety_only(env.as_ref(), config.step_cap);

            let (demo_steps, baseline_score) = match family {
                EnvFamily::Flappy => {
                    let flappy = env.as_flappy().unwrap();
                    let baseline = planner::run_flappy_baseline(
                        flappy,
                        config.t_strategy,
                        config.step_cap,
                    );
                    (
                        None,
                        Some(flappy.score(baseline.states.last().unwrap())),
                    )
                }
                _ => {
                    let demo_config = DemoConfig {
                        horizon: config.demo.horizon,
                        budget: config.demo.budget.clone(),
                        step_cap: config.demo.step_cap,
                        seed: rng::sub_seed(config.seed, "demo", instance),
                    };
                    let steps = envs::demonstrate(env.as_ref(), &demo_config)
                        .map(|d| d.duration())
                        .ok();
                    (steps, None)
                }
            };

            EvalRow {
                env_id: env.id().to_string(),
                hpl_steps: hpl_exec.duration(),
                hpl_completed: hpl_exec.complete,
                hpl_violations: count_violations(env.as_ref(), &hpl_exec),
                hpl_safety_mode_steps: logs
                    .iter()
                    .filter(|l| l.mode == Mode::SafetyControl)
                    .count(),
                safety_steps: safety_exec.duration(),
                safety_completed: safety_exec.complete,
                demo_steps,
                hpl_score: env
                    .as_flappy()
                    .map(|f| f.score(hpl_exec.states.last().unwrap())),
                baseline_score,
                safety_score: env
                    .as_flappy()
                    .map(|f| f.score(safety_exec.states.last().unwrap())),
            }
        })
        .collect();

    let dir = config.out_dir.join("eval");
    ensure_dir(&dir)?;
    let mut table = String::from(
        "env_id,hpl_steps,hpl_completed,hpl_violations,hpl_safety_mode_steps,\
         safety_steps,safety_completed,demo_steps,hpl_score,baseline_score,safety_score\n",
    );
    let opt = |v: &Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.env_id,
            r.hpl_steps,
            r.hpl_completed,
            r.hpl_violations,
            r.hpl_safety_mode_steps,
            r.safety_steps,
            r.safety_completed,
            opt(&r.demo_steps),
            opt(&r.hpl_score),
            opt(&r.baseline_score),
            opt(&r.safety_score),
        ));
    }
    write_string(&dir.join("table.csv"), &table)?;

    let mean = |values: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let v: Vec<usize> = values.collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<usize>() as f64 / v.len() as f64)
        }
    };
    let is_game = family == EnvFamily::Flappy;
    let summary = EvalSummary {
        total_violations: rows.iter().map(|r| r.hpl_violations).sum(),
        mean_hpl_steps: if is_game {
            None
        } else {
            mean(&mut rows.iter().map(|r| r.hpl_steps))
        },
        mean_safety_steps: if is_game {
            None
        } else {
            mean(&mut rows.iter().map(|r| r.safety_steps))
        },
        mean_demo_steps: if is_game {
            None
        } else {
            mean(&mut rows.iter().filter_map(|r| r.demo_steps))
        },
        hpl_scores: is_game.then(|| {
            ScoreStats::from(rows.iter().filter_map(|r| r.hpl_score).map(|s| s as f64))
        }),
        baseline_scores: is_game.then(|| {
            ScoreStats::from(
                rows.iter()
                    .filter_map(|r| r.baseline_score)
                    .map(|s| s as f64),
            )
        }),
        rows,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifySummary {
    pub family: String,
    pub instances: usize,
    pub total_samples: usize,
    pub horizon: usize,
    pub total_violations: usize,
    pub certified: bool,
}

/// Certifies the shipped safe set of the configured family by sampling
/// rollouts across seeded instances.
pub fn cmd_verify_safe(config: &RunConfig) -> Result<VerifySummary, CliError> {
    let family = family_of(config)?;
    let reports: Vec<InvarianceReport> = (0..config.verify.instances)
        .into_par_iter()
        .map(|i| {
            let env = generate_instance(config, family, i as u64);
            let safe = SafeSet::shipped(env.as_ref());
            safety::verify_invariance(
                env.as_ref(),
                &safe,
                config.verify.samples_per_instance,
                config.verify.horizon,
                rng::sub_seed(config.seed, "verify", i as u64),
            )
        })
        .collect();

    let dir = config.out_dir.join("verify");
    ensure_dir(&dir)?;
    write_json(&dir.join("reports.json"), &reports)?;
    let summary = VerifySummary {
        family: family.name().to_string(),
        instances: reports.len(),
        total_samples: reports.iter().map(|r| r.n_samples).sum(),
        horizon: config.verify.horizon,
        total_violations: reports.iter().map(|r| r.violations.len()).sum(),
        certified: reports.iter().all(|r| r.certified()),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}
