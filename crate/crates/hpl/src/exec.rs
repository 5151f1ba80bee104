//! Stored task executions: state/input trajectories with feasibility flags.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::envs::Environment;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed execution csv at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// One execution of one task: the visited states, the applied inputs, and
/// the checks a stored trajectory has to pass before it may train a
/// strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub env_id: String,
    /// Visited states `x_0 ..= x_D`.
    pub states: Vec<Vec<f64>>,
    /// Applied inputs `u_0 ..= u_{D-1}`; one shorter than `states`.
    pub inputs: Vec<Vec<f64>>,
    /// Every visited state satisfied the joint constraints.
    pub states_feasible: bool,
    /// Every applied input satisfied the input constraints.
    pub inputs_feasible: bool,
    /// The final state reached the task target set.
    pub reached_target: bool,
    /// False when the run stopped at a step cap instead of finishing.
    pub complete: bool,
}

impl Execution {
    /// Duration in steps (the index of the final state).
    pub fn duration(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// A feasible execution: constraints held throughout and the task
    /// target was reached.
    pub fn is_feasible(&self) -> bool {
        self.states_feasible && self.inputs_feasible && self.reached_target
    }

    /// Recomputes the feasibility flags against an environment. Used to
    /// validate stored corpora independently of whoever produced them.
    pub fn checked_against(mut self, env: &dyn Environment) -> Self {
        self.states_feasible = self.states.iter().all(|x| env.constraints_ok(x));
        self.inputs_feasible = self.inputs.iter().all(|u| env.input_ok(u));
        self.reached_target = self
            .states
            .last()
            .map(|x| env.task_done(x))
            .unwrap_or(false);
        self
    }

    /// Writes the trajectory as CSV: one row per step `k`, state columns
    /// then input columns; input cells are empty on the final row.
    pub fn to_csv(&self) -> String {
        let nx = self.states.first().map(|x| x.len()).unwrap_or(0);
        let nu = self.inputs.first().map(|u| u.len()).unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# env_id={} duration={} states_feasible={} inputs_feasible={} reached_target={} complete={}",
            self.env_id,
            self.duration(),
            self.states_feasible,
            self.inputs_feasible,
            self.reached_target,
            self.complete
        );
        let mut header = String::from("k");
        for i in 0..nx {
            let _ = write!(header, ",x{i}");
        }
        for i in 0..nu {
            let _ = write!(header, ",u{i}");
        }
        let _ = writeln!(out, "{header}");
        for (k, x) in self.states.iter().enumerate() {
            let _ = write!(out, "{k}");
            for v in x {
                let _ = write!(out, ",{v}");
            }
            if k < self.inputs.len() {
                for v in &self.inputs[k] {
                    let _ = write!(out, ",{v}");
                }
            } else {
                for _ in 0..nu {
                    let _ = write!(out, ",");
                }
            }
            let _ = writeln!(out);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), ExecError> {
        std::fs::write(path, self.to_csv()).map_err(|source| ExecError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn from_csv(text: &str) -> Result<Self, ExecError> {
        let mut lines = text.lines().enumerate();
        let (_, meta) = lines.next().ok_or(ExecError::Malformed {
            line: 1,
            reason: "empty file".into(),
        })?;
        let mut env_id = String::new();
        let mut states_feasible = false;
        let mut inputs_feasible = false;
        let mut reached_target = false;
        let mut complete = false;
        for part in meta.trim_start_matches('#').split_whitespace() {
            if let Some((key, value)) = part.split_once('=') {
                match key {
                    "env_id" => env_id = value.to_string(),
                    "states_feasible" => states_feasible = value == "true",
                    "inputs_feasible" => inputs_feasible = value == "true",
                    "reached_target" => reached_target = value == "true",
                    "complete" => complete = value == "true",
                    _ => {}
                }
            }
        }
        let (_, header) = lines.next().ok_or(ExecError::Malformed {
            line: 2,
            reason: "missing header".into(),
        })?;
        let nx = header.split(',').filter(|c| c.starts_with('x')).count();
        let nu = header.split(',').filter(|c| c.starts_with('u')).count();

        let mut states = Vec::new();
        let mut inputs = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 1 + nx + nu {
                return Err(ExecError::Malformed {
                    line: idx + 1,
                    reason: format!("expected {} cells, got {}", 1 + nx + nu, cells.len()),
                });
            }
            let parse = |s: &str, line: usize| -> Result<f64, ExecError> {
                s.parse().map_err(|_| ExecError::Malformed {
                    line,
                    reason: format!("bad number {s:?}"),
                })
            };
            let mut x = Vec::with_capacity(nx);
            for cell in &cells[1..1 + nx] {
                x.push(parse(cell, idx + 1)?);
            }
            states.push(x);
            if !cells[1 + nx..].iter().all(|c| c.is_empty()) {
                let mut u = Vec::with_capacity(nu);
                for cell in &cells[1 + nx..] {
                    u.push(parse(cell, idx + 1)?);
                }
                inputs.push(u);
            }
        }
        Ok(Self {
            env_id,
            states,
            inputs,
            states_feasible,
            inputs_feasible,
            reached_target,
            complete,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self, ExecError> {
        let text = std::fs::read_to_string(path).map_err(|source| ExecError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let exec = Execution {
            env_id: "tube-7".into(),
            states: vec![vec![0.0, 0.5], vec![0.1, 0.45], vec![0.2, 0.5]],
            inputs: vec![vec![1.0], vec![-0.5]],
            states_feasible: true,
            inputs_feasible: true,
            reached_target: false,
            complete: true,
        };
        let text = exec.to_csv();
        let back = Execution::from_csv(&text).unwrap();
        assert_eq!(exec, back);
    }

    #[test]
    fn duration_counts_steps_not_states() {
        let exec = Execution {
            env_id: String::new(),
            states: vec![vec![0.0]; 11],
            inputs: vec![vec![0.0]; 10],
            states_feasible: true,
            inputs_feasible: true,
            reached_target: true,
            complete: true,
        };
        assert_eq!(exec.duration(), 10);
    }
}
