//! Strategy learning: from stored executions to reduced-dimension target
//! boxes.
//!
//! The offline half turns a corpus of feasible executions into GP training
//! data (one row per usable step: current state plus the descriptor
//! forecast, mapped to where the strategy states ended up `T` steps later
//! and which strategy inputs were used on the way). One GP is fitted per
//! output dimension, all sharing the same input vectors. The online half
//! evaluates the fitted GPs at the current query and forms hyperrectangles
//! `mean +/- eta * std`, plus a confidence vector that gates whether the
//! prediction is trustworthy enough to act on.
//!
//! Inputs and outputs are standardized before fitting, so the confidence
//! vector (and the gate threshold `d_thresh`) is expressed in units of the
//! output standard deviation, uniformly across dimensions.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::envs::Environment;
use crate::exec::Execution;
use crate::gp::{FitConfig, GpError, GpModel, InputMatrix};

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("executions disagree on dimensions: {0}")]
    DimensionMismatch(String),
    #[error("fitting the GP for output {output} failed: {source}")]
    Fit {
        output: String,
        #[source]
        source: GpError,
    },
    #[error("query dimension mismatch: expected {expected}, got {got}")]
    QueryDimension { expected: usize, got: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed strategy artifact: {0}")]
    Parse(String),
}

/// Dimensions of the strategy-space projections in use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub state_dim: usize,
    pub theta_dim: usize,
    pub n_strategy_states: usize,
    pub n_strategy_inputs: usize,
}

/// GP training data assembled from a corpus of executions.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyDataset {
    pub projections: ProjectionSpec,
    pub n_forecast: usize,
    pub t_strategy: usize,
    /// Query rows `z_k = [x_k, theta_k, ..., theta_{k+N}]`.
    pub inputs: Vec<Vec<f64>>,
    /// Strategy-state targets `T` steps ahead, one row per input row.
    pub state_targets: Vec<Vec<f64>>,
    /// Per-dimension minimum of the strategy inputs over the window.
    pub input_min: Vec<Vec<f64>>,
    /// Per-dimension maximum of the strategy inputs over the window.
    pub input_max: Vec<Vec<f64>>,
}

impl StrategyDataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn query_dim(&self) -> usize {
        self.projections.state_dim + (self.n_forecast + 1) * self.projections.theta_dim
    }

    /// CSV persistence: a metadata comment line, a header, one row per
    /// z/y pair.
    pub fn to_csv(&self) -> String {
        let p = &self.projections;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# rows={} z_dim={} state_dim={} theta_dim={} n_sx={} n_su={} N={} T={}",
            self.len(),
            self.query_dim(),
            p.state_dim,
            p.theta_dim,
            p.n_strategy_states,
            p.n_strategy_inputs,
            self.n_forecast,
            self.t_strategy
        );
        let mut header = String::new();
        for i in 0..self.query_dim() {
            let _ = write!(header, "{}z{i}", if i == 0 { "" } else { "," });
        }
        for i in 0..p.n_strategy_states {
            let _ = write!(header, ",sx{i}");
        }
        for i in 0..p.n_strategy_inputs {
            let _ = write!(header, ",umin{i}");
        }
        for i in 0..p.n_strategy_inputs {
            let _ = write!(header, ",umax{i}");
        }
        let _ = writeln!(out, "{header}");
        for r in 0..self.len() {
            let mut row = String::new();
            for (i, v) in self.inputs[r].iter().enumerate() {
                let _ = write!(row, "{}{v}", if i == 0 { "" } else { "," });
            }
            for v in &self.state_targets[r] {
                let _ = write!(row, ",{v}");
            }
            for v in &self.input_min[r] {
                let _ = write!(row, ",{v}");
            }
            for v in &self.input_max[r] {
                let _ = write!(row, ",{v}");
            }
            let _ = writeln!(out, "{row}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, StrategyError> {
        let mut lines = text.lines();
        let meta = lines
            .next()
            .ok_or_else(|| StrategyError::Parse("empty dataset file".into()))?;
        let mut fields = std::collections::HashMap::new();
        for part in meta.trim_start_matches('#').split_whitespace() {
            if let Some((k, v)) = part.split_once('=') {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let get = |k: &str| -> Result<usize, StrategyError> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| StrategyError::Parse(format!("missing metadata field {k}")))
        };
        let projections = ProjectionSpec {
            state_dim: get("state_dim")?,
            theta_dim: get("theta_dim")?,
            n_strategy_states: get("n_sx")?,
            n_strategy_inputs: get("n_su")?,
        };
        let n_forecast = get("N")?;
        let t_strategy = get("T")?;
        let z_dim = get("z_dim")?;
        lines.next(); // header
        let mut ds = StrategyDataset {
            projections,
            n_forecast,
            t_strategy,
            inputs: Vec::new(),
            state_targets: Vec::new(),
            input_min: Vec::new(),
            input_max: Vec::new(),
        };
        let expected =
            z_dim + projections.n_strategy_states + 2 * projections.n_strategy_inputs;
        for (idx, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Result<Vec<f64>, _> = line.split(',').map(|c| c.parse()).collect();
            let cells =
                cells.map_err(|_| StrategyError::Parse(format!("bad number on row {idx}")))?;
            if cells.len() != expected {
                return Err(StrategyError::Parse(format!(
                    "row {idx}: expected {expected} cells, got {}",
                    cells.len()
                )));
            }
            let (z, rest) = cells.split_at(z_dim);
            let (sx, rest) = rest.split_at(projections.n_strategy_states);
            let (umin, umax) = rest.split_at(projections.n_strategy_inputs);
            ds.inputs.push(z.to_vec());
            ds.state_targets.push(sx.to_vec());
            ds.input_min.push(umin.to_vec());
            ds.input_max.push(umax.to_vec());
        }
        Ok(ds)
    }
}

/// Which executions were usable, and why the others were not.
#[derive(Debug, Clone, Default)]
pub struct BuildReport {
    pub used: usize,
    pub skipped: Vec<String>,
}

/// Builds GP training data from stored executions. Each execution pairs
/// with the environment it solved. Infeasible executions are rejected and
/// too-short ones skipped, both with diagnostics in the report.
pub fn build_dataset(
    corpus: &[(&dyn Environment, &Execution)],
    n_forecast: usize,
    t_strategy: usize,
) -> Result<(StrategyDataset, BuildReport), StrategyError> {
    let (env0, _) = corpus
        .first()
        .ok_or_else(|| StrategyError::EmptyDataset("no executions supplied".into()))?;
    let projections = ProjectionSpec {
        state_dim: env0.state_dim(),
        theta_dim: env0.theta_dim(),
        n_strategy_states: env0.strategy_state_dim(),
        n_strategy_inputs: env0.strategy_input_dim(),
    };
    let mut ds = StrategyDataset {
        projections,
        n_forecast,
        t_strategy,
        inputs: Vec::new(),
        state_targets: Vec::new(),
        input_min: Vec::new(),
        input_max: Vec::new(),
    };
    let mut report = BuildReport::default();
    let mut forecast = Vec::new();

    for (env, exec) in corpus {
        if env.state_dim() != projections.state_dim
            || env.theta_dim() != projections.theta_dim
            || env.strategy_state_dim() != projections.n_strategy_states
            || env.strategy_input_dim() != projections.n_strategy_inputs
        {
            return Err(StrategyError::DimensionMismatch(format!(
                "environment {} does not match the corpus projections",
                env.id()
            )));
        }
        if !exec.is_feasible() {
            report.skipped.push(format!(
                "{}: rejected, stored execution fails feasibility checks \
                 (states {}, inputs {}, target {})",
                exec.env_id, exec.states_feasible, exec.inputs_feasible, exec.reached_target
            ));
            continue;
        }
        let duration = exec.duration();
        if duration < t_strategy {
            report.skipped.push(format!(
                "{}: skipped, {} states is shorter than T+1 = {}",
                exec.env_id,
                exec.states.len(),
                t_strategy + 1
            ));
            continue;
        }
        let n_su = projections.n_strategy_inputs;
        let mut proj_u = vec![0.0; n_su];
        for k in 0..=(duration - t_strategy) {
            let x_k = &exec.states[k];
            env.forecast_into(x_k, n_forecast, &mut forecast);
            let mut z = Vec::with_capacity(ds.query_dim());
            z.extend_from_slice(x_k);
            z.extend_from_slice(&forecast);
            ds.inputs.push(z);
            ds.state_targets
                .push(env.strategy_targets(&exec.states, k, t_strategy));
            // Strategy-input summary over the window's applied inputs.
            let mut mins = vec![f64::INFINITY; n_su];
            let mut maxs = vec![f64::NEG_INFINITY; n_su];
            for j in k..k + t_strategy {
                env.project_input(&exec.states[j], &exec.inputs[j], &mut proj_u);
                for d in 0..n_su {
                    mins[d] = mins[d].min(proj_u[d]);
                    maxs[d] = maxs[d].max(proj_u[d]);
                }
            }
            ds.input_min.push(mins);
            ds.input_max.push(maxs);
        }
        report.used += 1;
    }
    Ok((ds, report))
}

/// Fitting configuration for a whole strategy.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct StrategyFitConfig {
    pub gp: FitConfig,
    /// Training rows are thinned to at most this many by a deterministic
    /// stride before fitting; GP cost is cubic in the row count.
    pub max_rows: usize,
}

impl Default for StrategyFitConfig {
    fn default() -> Self {
        Self {
            gp: FitConfig::default(),
            max_rows: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OutputScaling {
    mean: f64,
    std: f64,
}

/// A trained strategy: one GP per strategy-state dimension plus min/max
/// GPs per strategy-input dimension, with the standardization that made
/// their outputs comparable. Immutable once trained.
#[derive(Debug, Clone)]
pub struct Strategy {
    pub projections: ProjectionSpec,
    pub n_forecast: usize,
    pub t_strategy: usize,
    z_mean: Vec<f64>,
    z_std: Vec<f64>,
    state_models: Vec<GpModel>,
    state_scaling: Vec<OutputScaling>,
    input_min_models: Vec<GpModel>,
    input_min_scaling: Vec<OutputScaling>,
    input_max_models: Vec<GpModel>,
    input_max_scaling: Vec<OutputScaling>,
}

/// A strategy evaluation: hyperrectangles in strategy state and input
/// space, plus the per-GP standard deviations that gate their use.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySet {
    pub state_box: Vec<(f64, f64)>,
    pub input_box: Vec<(f64, f64)>,
    /// Predictive standard deviations, in standardized output units: one
    /// per strategy state, then one per strategy input.
    pub confidence: Vec<f64>,
}

/// Accept a strategy evaluation only when every confidence component is
/// at or below the threshold.
pub fn confidence_gate(confidence: &[f64], d_thresh: f64) -> bool {
    debug_assert!(d_thresh > 0.0);
    confidence.iter().all(|c| *c <= d_thresh)
}

fn standardize_stats(rows: &[Vec<f64>], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; dim];
    for r in rows {
        for d in 0..dim {
            let diff = r[d] - mean[d];
            std[d] += diff * diff;
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt().max(1e-9);
    }
    (mean, std)
}

fn column_scaling(rows: &[Vec<f64>], col: usize) -> OutputScaling {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r[col]).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r[col] - mean).powi(2)).sum::<f64>() / n;
    OutputScaling {
        mean,
        std: var.sqrt().max(1e-9),
    }
}

/// Trains one GP per output dimension on a shared standardized input set.
pub fn train_strategy(
    ds: &StrategyDataset,
    config: &StrategyFitConfig,
) -> Result<Strategy, StrategyError> {
    if ds.is_empty() {
        return Err(StrategyError::EmptyDataset(
            "no training rows were built from the corpus".into(),
        ));
    }
    // Deterministic thinning: an even stride over the row order.
    let stride = ds.len().div_ceil(config.max_rows.max(1));
    let rows: Vec<usize> = (0..ds.len()).step_by(stride.max(1)).collect();

    let take = |source: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter().map(|r| source[*r].clone()).collect()
    };
    let inputs = take(&ds.inputs);
    let state_targets = take(&ds.state_targets);
    let input_min = take(&ds.input_min);
    let input_max = take(&ds.input_max);

    let z_dim = ds.query_dim();
    let (z_mean, z_std) = standardize_stats(&inputs, z_dim);
    let standardized: Vec<Vec<f64>> = inputs
        .iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(d, v)| (v - z_mean[d]) / z_std[d])
                .collect()
        })
        .collect();
    let z = InputMatrix::from_rows(&standardized).map_err(|source| StrategyError::Fit {
        output: "shared inputs".into(),
        source,
    })?;

    let fit_column = |rows_y: &[Vec<f64>],
                      col: usize,
                      name: &str,
                      seed_index: u64|
     -> Result<(GpModel, OutputScaling), StrategyError> {
        let scaling = column_scaling(rows_y, col);
        let y: Vec<f64> = rows_y
            .iter()
            .map(|r| (r[col] - scaling.mean) / scaling.std)
            .collect();
        let gp_config = FitConfig {
            seed: crate::rng::sub_seed(config.gp.seed, "strategy-gp", seed_index),
            ..config.gp.clone()
        };
        let model =
            GpModel::fit(z.clone(), y, &gp_config).map_err(|source| StrategyError::Fit {
                output: name.to_string(),
                source,
            })?;
        Ok((model, scaling))
    };

    let p = ds.projections;
    let mut state_models = Vec::new();
    let mut state_scaling = Vec::new();
    for i in 0..p.n_strategy_states {
        let (m, s) = fit_column(&state_targets, i, &format!("strategy state {i}"), i as u64)?;
        state_models.push(m);
        state_scaling.push(s);
    }
    let mut input_min_models = Vec::new();
    let mut input_min_scaling = Vec::new();
    let mut input_max_models = Vec::new();
    let mut input_max_scaling = Vec::new();
    for i in 0..p.n_strategy_inputs {
        let (m, s) = fit_column(
            &input_min,
            i,
            &format!("strategy input {i} window minimum"),
            100 + i as u64,
        )?;
        input_min_models.push(m);
        input_min_scaling.push(s);
        let (m, s) = fit_column(
            &input_max,
            i,
            &format!("strategy input {i} window maximum"),
            200 + i as u64,
        )?;
        input_max_models.push(m);
        input_max_scaling.push(s);
    }

    Ok(Strategy {
        projections: p,
        n_forecast: ds.n_forecast,
        t_strategy: ds.t_strategy,
        z_mean,
        z_std,
        state_models,
        state_scaling,
        input_min_models,
        input_min_scaling,
        input_max_models,
        input_max_scaling,
    })
}

impl Strategy {
    pub fn query_dim(&self) -> usize {
        self.projections.state_dim + (self.n_forecast + 1) * self.projections.theta_dim
    }

    /// Evaluates all GPs at `[x_k, forecast]` and forms the strategy set
    /// with per-dimension intervals `mean +/- eta * std`.
    pub fn evaluate(
        &self,
        x: &[f64],
        forecast: &[f64],
        eta: f64,
    ) -> Result<StrategySet, StrategyError> {
        let expected = self.query_dim();
        if x.len() + forecast.len() != expected {
            return Err(StrategyError::QueryDimension {
                expected,
                got: x.len() + forecast.len(),
            });
        }
        let mut z = Vec::with_capacity(expected);
        z.extend_from_slice(x);
        z.extend_from_slice(forecast);
        for (d, v) in z.iter_mut().enumerate() {
            *v = (*v - self.z_mean[d]) / self.z_std[d];
        }

        let predict = |model: &GpModel| -> Result<(f64, f64), StrategyError> {
            model.predict(&z).map_err(|source| StrategyError::Fit {
                output: "prediction".into(),
                source,
            })
        };

        let mut state_box = Vec::with_capacity(self.state_models.len());
        let mut confidence = Vec::with_capacity(
            self.state_models.len() + self.input_min_models.len(),
        );
        for (model, scaling) in self.state_models.iter().zip(&self.state_scaling) {
            let (m_hat, s_hat) = predict(model)?;
            let mean = m_hat * scaling.std + scaling.mean;
            let spread = eta * s_hat * scaling.std;
            state_box.push((mean - spread, mean + spread));
            confidence.push(s_hat);
        }
        let mut input_box = Vec::with_capacity(self.input_min_models.len());
        for i in 0..self.input_min_models.len() {
            let (lo_hat, lo_s) = predict(&self.input_min_models[i])?;
            let (hi_hat, hi_s) = predict(&self.input_max_models[i])?;
            let sc_lo = &self.input_min_scaling[i];
            let sc_hi = &self.input_max_scaling[i];
            let mut lo = lo_hat * sc_lo.std + sc_lo.mean - eta * lo_s * sc_lo.std;
            let mut hi = hi_hat * sc_hi.std + sc_hi.mean + eta * hi_s * sc_hi.std;
            if lo > hi {
                let mid = 0.5 * (lo + hi);
                lo = mid;
                hi = mid;
            }
            input_box.push((lo, hi));
            confidence.push(lo_s.max(hi_s));
        }
        Ok(StrategySet {
            state_box,
            input_box,
            confidence,
        })
    }

    /// Persists the strategy as a directory: a manifest plus one GP JSON
    /// file per output dimension.
    pub fn save_dir(&self, dir: &Path) -> Result<(), StrategyError> {
        let io_err = |path: &Path, source: std::io::Error| StrategyError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let manifest = Manifest {
            format_version: 1,
            projections: self.projections,
            n_forecast: self.n_forecast,
            t_strategy: self.t_strategy,
            z_mean: self.z_mean.clone(),
            z_std: self.z_std.clone(),
            state_scaling: self.state_scaling.clone(),
            input_min_scaling: self.input_min_scaling.clone(),
            input_max_scaling: self.input_max_scaling.clone(),
        };
        let manifest_path = dir.join("manifest.json");
        std::fs::write(
            &manifest_path,
            serde_json::to_string_pretty(&manifest).expect("manifest serialization"),
        )
        .map_err(|e| io_err(&manifest_path, e))?;
        let write_models = |models: &[GpModel], prefix: &str| -> Result<(), StrategyError> {
            for (i, m) in models.iter().enumerate() {
                let path = dir.join(format!("gp_{prefix}_{i}.json"));
                std::fs::write(&path, m.to_json()).map_err(|e| io_err(&path, e))?;
            }
            Ok(())
        };
        write_models(&self.state_models, "state")?;
        write_models(&self.input_min_models, "umin")?;
        write_models(&self.input_max_models, "umax")?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self, StrategyError> {
        let io_err = |path: &Path, source: std::io::Error| StrategyError::Io {
            path: path.display().to_string(),
            source,
        };
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| StrategyError::Parse(e.to_string()))?;
        if manifest.format_version != 1 {
            return Err(StrategyError::Parse(format!(
                "unsupported strategy format_version {}",
                manifest.format_version
            )));
        }
        let read_models = |prefix: &str, count: usize| -> Result<Vec<GpModel>, StrategyError> {
            (0..count)
                .map(|i| {
                    let path = dir.join(format!("gp_{prefix}_{i}.json"));
                    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                    GpModel::from_json(&text).map_err(|e| StrategyError::Parse(e.to_string()))
                })
                .collect()
        };
        let p = manifest.projections;
        Ok(Self {
            projections: p,
            n_forecast: manifest.n_forecast,
            t_strategy: manifest.t_strategy,
            z_mean: manifest.z_mean,
            z_std: manifest.z_std,
            state_models: read_models("state", p.n_strategy_states)?,
            state_scaling: manifest.state_scaling,
            input_min_models: read_models("umin", p.n_strategy_inputs)?,
            input_min_scaling: manifest.input_min_scaling,
            input_max_models: read_models("umax", p.n_strategy_inputs)?,
            input_max_scaling: manifest.input_max_scaling,
        })
    }

    /// Content hash of the persisted artifact, for run provenance.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.projections).unwrap());
        hasher.update(self.n_forecast.to_le_bytes());
        hasher.update(self.t_strategy.to_le_bytes());
        for v in self.z_mean.iter().chain(&self.z_std) {
            hasher.update(v.to_le_bytes());
        }
        let mut update_models = |models: &[GpModel]| {
            for m in models {
                hasher.update(m.to_json().as_bytes());
            }
        };
        update_models(&self.state_models);
        update_models(&self.input_min_models);
        update_models(&self.input_max_models);
        format!("{:x}", hasher.finalize())
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    projections: ProjectionSpec,
    n_forecast: usize,
    t_strategy: usize,
    z_mean: Vec<f64>,
    z_std: Vec<f64>,
    state_scaling: Vec<OutputScaling>,
    input_min_scaling: Vec<OutputScaling>,
    input_max_scaling: Vec<OutputScaling>,
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
                length: 30.0,
            }],
            0.4,
        )
    }

    fn synthetic_execution(env: &TubeEnv, steps: usize) -> Execution {
        let mut states = vec![env.initial_state()];
        let mut inputs = Vec::new();
        for k in 0..steps {
            let u = vec![if k % 2 == 0 { 0.3 } else { -0.3 }, 0.0];
            let next = env.step(states.last().unwrap(), &u);
            inputs.push(u);
            states.push(next);
        }
        Execution {
            env_id: env.id().to_string(),
            states,
            inputs,
            states_feasible: true,
            inputs_feasible: true,
            reached_target: true,
            complete: true,
        }
    }

    #[test]
    fn row_count_is_duration_minus_t_plus_one() {
        let env = flat_tube();
        let exec = synthetic_execution(&env, 10);
        let (ds, report) = build_dataset(&[(&env, &exec)], 10, 5).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(report.used, 1);
    }

    #[test]
    fn row_counts_add_up_across_executions() {
        let env = flat_tube();
        let e1 = synthetic_execution(&env, 10);
        let e2 = synthetic_execution(&env, 8);
        let (ds, _) = build_dataset(&[(&env, &e1), (&env, &e2)], 10, 5).unwrap();
        assert_eq!(ds.len(), 6 + 4);
    }

    #[test]
    fn query_rows_carry_state_and_forecast() {
        let env = flat_tube();
        let exec = synthetic_execution(&env, 10);
        let (ds, _) = build_dataset(&[(&env, &exec)], 10, 5).unwrap();
        // n_x + (N + 1) * dim(theta)
        assert_eq!(ds.inputs[0].len(), 4 + 11);
    }

    #[test]
    fn infeasible_executions_are_rejected_with_diagnostics() {
        let env = flat_tube();
        let mut exec = synthetic_execution(&env, 10);
        exec.states_feasible = false;
        let (ds, report) = build_dataset(&[(&env, &exec)], 10, 5).unwrap();
        assert!(ds.is_empty());
        assert_eq!(report.skipped.len(), 1);
        assert!(report.skipped[0].contains("rejected"));
    }

    #[test]
    fn short_executions_are_skipped_with_a_warning() {
        let env = flat_tube();
        let exec = synthetic_execution(&env, 3);
        let (ds, report) = build_dataset(&[(&env, &exec)], 10, 5).unwrap();
        assert!(ds.is_empty());
        assert!(report.skipped[0].contains("skipped"));
    }

    #[test]
    fn training_on_an_empty_dataset_fails() {
        let ds = StrategyDataset {
            projections: ProjectionSpec {
                state_dim: 4,
                theta_dim: 1,
                n_strategy_states: 2,
                n_strategy_inputs: 2,
            },
            n_forecast: 10,
            t_strategy: 5,
            inputs: Vec::new(),
            state_targets: Vec::new(),
            input_min: Vec::new(),
            input_max: Vec::new(),
        };
        assert!(matches!(
            train_strategy(&ds, &StrategyFitConfig::default()),
            Err(StrategyError::EmptyDataset(_))
        ));
    }

    fn quick_fit() -> StrategyFitConfig {
        StrategyFitConfig {
            gp: FitConfig {
                restarts: 2,
                iterations: 25,
                seed: 5,
            },
            max_rows: 200,
        }
    }

    #[test]
    fn constant_targets_predict_the_constant() {
        let env = flat_tube();
        let exec = synthetic_execution(&env, 20);
        let (mut ds, _) = build_dataset(&[(&env, &exec)], 5, 5).unwrap();
        for row in &mut ds.state_targets {
            row[0] = 3.25;
            row[1] = 3.25;
        }
        let strategy = train_strategy(&ds, &quick_fit()).unwrap();
        let x = &ds.inputs[2][..4];
        let forecast = &ds.inputs[2][4..];
        let set = strategy.evaluate(x, forecast, 2.0).unwrap();
        for (lo, hi) in &set.state_box[..2] {
            assert!(*lo <= 3.25 && 3.25 <= *hi);
            assert!((0.5 * (lo + hi) - 3.25).abs() < 1e-3);
        }
    }

    #[test]
    fn eta_scales_the_intervals_and_zero_collapses_them() {
        let env = flat_tube();
        let exec = synthetic_execution(&env, 20);
        let (ds, _) = build_dataset(&[(&env, &exec)], 5, 5).unwrap();
        let strategy = train_strategy(&ds, &quick_fit()).unwrap();
        let x = &ds.inputs[0][..4];
        let forecast = &ds.inputs[0][4..];
        let narrow = strategy.evaluate(x, forecast, 1.0).unwrap();
        let wide = strategy.evaluate(x, forecast, 3.0).unwrap();
        let degenerate = strategy.evaluate(x, forecast, 0.0).unwrap();
        for i in 0..2 {
            assert!(wide.state_box[i].0 <= narrow.state_box[i].0);
            assert!(wide.state_box[i].1 >= narrow.state_box[i].1);
            assert!((degenerate.state_box[i].1 - degenerate.state_box[i].0).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_from_known_mean_and_std_matches_the_rule() {
        // mean 2, std 0.5, eta 2 -> [1, 3]
        let (mean, std, eta) = (2.0, 0.5, 2.0);
        assert_eq!((mean - eta * std, mean + eta * std), (1.0, 3.0));
    }

    #[test]
    fn gate_accepts_below_and_rejects_above() {
        assert!(confidence_gate(&[0.1, 0.1], 0.5));
        assert!(!confidence_gate(&[0.1, 0.9], 0.5));
        // Raising the threshold never flips accept into reject.
        assert!(confidence_gate(&[0.1, 0.9], 1.0));
    }

    #[test]
    fn save_and_load_round_trip_predictions() {
        let env = flat_tube();
        let exec = synthetic_execution(&env, 20);
        let (ds, _) = build_dataset(&[(&env, &exec)], 5, 5).unwrap();
        let strategy = train_strategy(&ds, &quick_fit()).unwrap();
        let dir = std::env::temp_dir().join(format!("hpl-strategy-{}", std::process::id()));
        strategy.save_dir(&dir).unwrap();
        let restored = Strategy::load_dir(&dir).unwrap();
        let x = &ds.inputs[1][..4];
        let forecast = &ds.inputs[1][4..];
        let a = strategy.evaluate(x, forecast, 2.0).unwrap();
        let b = restored.evaluate(x, forecast, 2.0).unwrap();
        assert_eq!(a.state_box, b.state_box);
        assert_eq!(a.confidence, b.confidence);
        assert_eq!(strategy.content_hash(), restored.content_hash());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dataset_csv_round_trips() {
        let env = flat_tube();
        let exec = synthetic_execution(&env, 12);
        let (ds, _) = build_dataset(&[(&env, &exec)], 6, 4).unwrap();
        let text = ds.to_csv();
        let back = StrategyDataset::from_csv(&text).unwrap();
        assert_eq!(ds, back);
    }
}
