//! Flappy Bird: a three-state system with a binary flap input dodging a
//! sequence of pipe obstacles.
//!
//! Dynamics are exact: `x += 4`, `y += v_y`, `v_y += -1 + 16 u`. Only
//! on-screen pipes are known to the controller; the descriptor and all
//! tracking references are built from the visible set. Strategy states are
//! the vertical distances to the two closest upcoming gap centers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvFamily, Environment, InputSpace};
use crate::rng;

pub const PIPE_WIDTH: f64 = 52.0;
pub const PIPE_SPACING: f64 = 150.0;
pub const GAP_HALF: f64 = 45.0;
pub const BIRD_HALF: f64 = 12.0;
/// Effective half-gap once the bird's size is folded in.
pub const GAP_BAND: f64 = GAP_HALF - BIRD_HALF;
pub const SCREEN_CENTER: f64 = 256.0;
pub const Y_MIN: f64 = 28.0;
pub const Y_MAX: f64 = 484.0;
pub const VY_MIN: f64 = -24.0;
pub const VY_MAX: f64 = 16.0;
/// How far ahead (and behind) of the bird pipes are on screen.
pub const VISIBLE_AHEAD: f64 = 232.0;
pub const VISIBLE_BEHIND: f64 = 60.0;
const FIRST_PIPE_X: f64 = 400.0;
const CENTER_MIN: f64 = 180.0;
const CENTER_MAX: f64 = 335.0;
const SENTINEL_DX: f64 = 400.0;
/// Tracking horizon of the safety controller (exhaustively enumerated).
pub const SAFETY_HORIZON: usize = 8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Pipe {
    /// Leading-edge horizontal position.
    pub x: f64,
    /// Gap center height.
    pub center: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FlappySpec {
    family: String,
    id: String,
    seed_provenance: Option<(u64, u64)>,
    target_pipes: usize,
    pipes: Vec<Pipe>,
}

#[derive(Debug, Clone)]
pub struct FlappyEnv {
    id: String,
    pipes: Vec<Pipe>,
    target_pipes: usize,
    seed_provenance: Option<(u64, u64)>,
    input_space: InputSpace,
}

impl FlappyEnv {
    pub fn new(id: String, pipes: Vec<Pipe>, target_pipes: usize) -> Self {
        assert!(!pipes.is_empty() && target_pipes <= pipes.len());
        Self {
            id,
            pipes,
            target_pipes,
            seed_provenance: None,
            input_space: InputSpace::Binary,
        }
    }

    /// Seeded pipe sequence with mutually independent gap heights.
    pub fn generate(seed: u64, index: u64) -> Self {
        Self::generate_with_target(seed, index, 200)
    }

    pub fn generate_with_target(seed: u64, index: u64, target_pipes: usize) -> Self {
        let mut rng = rng::stream(seed, "flappy-pipes", index);
        let n = target_pipes + 4;
        let pipes = (0..n)
            .map(|i| Pipe {
                x: FIRST_PIPE_X + i as f64 * PIPE_SPACING,
                center: rng.gen_range(CENTER_MIN..CENTER_MAX),
            })
            .collect();
        let mut env = Self::new(format!("flappy-{seed}-{index}"), pipes, target_pipes);
        env.seed_provenance = Some((seed, index));
        env
    }

    pub fn pipes(&self) -> &[Pipe] {
        &self.pipes
    }

    pub fn target_pipes(&self) -> usize {
        self.target_pipes
    }

    /// Pipes fully passed by the bird: the game score.
    pub fn score(&self, x: &[f64]) -> usize {
        self.pipes
            .iter()
            .take(self.target_pipes)
            .filter(|p| x[0] > p.x + PIPE_WIDTH)
            .count()
    }

    fn visible_range(&self, x: f64) -> (usize, usize) {
        let lo = self
            .pipes
            .partition_point(|p| p.x + PIPE_WIDTH < x - VISIBLE_BEHIND);
        let hi = self.pipes.partition_point(|p| p.x <= x + VISIBLE_AHEAD);
        (lo, hi)
    }

    fn centerline_over(&self, pipes: &[Pipe], x: f64) -> f64 {
        const FREE: f64 = PIPE_SPACING - PIPE_WIDTH;
        if pipes.is_empty() {
            return SCREEN_CENTER;
        }
        let first = &pipes[0];
        if x < first.x {
            // Ramp in from the screen center (or simply hold it far out).
            let ramp_start = first.x - FREE;
            if x <= ramp_start {
                return SCREEN_CENTER;
            }
            let frac = (x - ramp_start) / FREE;
            return SCREEN_CENTER * (1.0 - frac) + first.center * frac;
        }
        for (i, p) in pipes.iter().enumerate() {
            let span_end = p.x + PIPE_WIDTH;
            if x <= span_end {
                return p.center;
            }
            if let Some(next) = pipes.get(i + 1) {
                if x < next.x {
                    let frac = (x - span_end) / (next.x - span_end);
                    return p.center * (1.0 - frac) + next.center * frac;
                }
            }
        }
        pipes.last().unwrap().center
    }

    /// Interpolated centerline of the visible pipe gaps: constant across
    /// each gap, linear between consecutive gaps, held outside.
    pub fn gap_centerline(&self, x: f64) -> f64 {
        let (lo, hi) = self.visible_range(x);
        self.centerline_over(&self.pipes[lo..hi], x)
    }

    /// Full-knowledge centerline; only the offline demonstrator may use it.
    fn full_centerline(&self, x: f64) -> f64 {
        self.centerline_over(&self.pipes, x)
    }

    /// The two closest pipes not yet fully passed at `x`, visible ones only.
    fn upcoming_visible(&self, x_now: f64, x_query: f64) -> [Option<&Pipe>; 2] {
        let (lo, hi) = self.visible_range(x_now);
        let mut found = [None, None];
        let mut count = 0;
        for p in &self.pipes[lo..hi] {
            if p.x + PIPE_WIDTH >= x_query {
                found[count] = Some(p);
                count += 1;
                if count == 2 {
                    break;
                }
            }
        }
        found
    }

    fn theta_at(&self, x_now: f64, x_query: f64, out: &mut [f64]) -> bool {
        let upcoming = self.upcoming_visible(x_now, x_query);
        for (slot, pipe) in upcoming.iter().enumerate() {
            match pipe {
                Some(p) => {
                    out[2 * slot] = p.x + 0.5 * PIPE_WIDTH - x_query;
                    out[2 * slot + 1] = p.center;
                }
                None => {
                    out[2 * slot] = SENTINEL_DX;
                    out[2 * slot + 1] = SCREEN_CENTER;
                }
            }
        }
        upcoming[0].is_none()
    }

    /// One step of the gap-centerline tracking controller: enumerate the
    /// binary input tree over `horizon` steps, filter by feasibility,
    /// minimize the tracking cost, and return the first input.
    fn tracking_input(&self, x: &[f64], horizon: usize, reference: Reference) -> f64 {
        let n_seq = 1usize << horizon;
        let mut best_feasible: Option<(f64, usize)> = None;
        let mut best_violation: Option<(f64, usize)> = None;
        for mask in 0..n_seq {
            let (mut cx, mut cy, mut cvy) = (x[0], x[1], x[2]);
            let mut cost = 0.0;
            let mut violation = 0.0;
            for j in 0..horizon {
                let u = ((mask >> j) & 1) as f64;
                cx += 4.0;
                cy += cvy;
                cvy += -1.0 + 16.0 * u;
                let target = match reference {
                    Reference::VisibleCenterline => self.gap_centerline(cx),
                    Reference::NextGapCenter => self
                        .upcoming_visible(x[0], cx)[0]
                        .map(|p| p.center)
                        .unwrap_or(SCREEN_CENTER),
                    Reference::FullCenterline => self.full_centerline(cx),
                };
                let dy = cy - target;
                cost += dy * dy + 0.02 * cvy * cvy;
                violation += self.constraint_violation(&[cx, cy, cvy]);
            }
            if violation == 0.0 {
                if best_feasible.map(|(c, _)| cost < c).unwrap_or(true) {
                    best_feasible = Some((cost, mask));
                }
            } else if best_violation
                .map(|(v, _)| violation < v)
                .unwrap_or(true)
            {
                best_violation = Some((violation, mask));
            }
        }
        let mask = best_feasible
            .or(best_violation)
            .map(|(_, m)| m)
            .unwrap_or(0);
        (mask & 1) as f64
    }

    /// The center-tracking baseline controller: same enumeration machinery
    /// but it aims at the nearest visible gap center instead of the
    /// interpolated centerline, with no anchoring beyond its horizon.
    pub fn baseline_input(&self, x: &[f64], horizon: usize) -> f64 {
        self.tracking_input(x, horizon.min(14), Reference::NextGapCenter)
    }

    /// Full-knowledge tracking input for the demonstrator.
    pub fn demo_input(&self, x: &[f64], horizon: usize) -> f64 {
        self.tracking_input(x, horizon.min(14), Reference::FullCenterline)
    }

    pub fn from_spec_json(text: &str) -> Result<Self, EnvError> {
        let spec: FlappySpec =
            serde_json::from_str(text).map_err(|e| EnvError::Parse(e.to_string()))?;
        if spec.pipes.is_empty() || spec.target_pipes > spec.pipes.len() {
            return Err(EnvError::Parse(
                "pipe list empty or shorter than the target".into(),
            ));
        }
        let mut env = Self::new(spec.id, spec.pipes, spec.target_pipes);
        env.seed_provenance = spec.seed_provenance;
        Ok(env)
    }
}

#[derive(Clone, Copy)]
enum Reference {
    VisibleCenterline,
    NextGapCenter,
    FullCenterline,
}

impl Environment for FlappyEnv {
    fn id(&self) -> &str {
        &self.id
    }

    fn family(&self) -> EnvFamily {
        EnvFamily::Flappy
    }

    fn state_dim(&self) -> usize {
        3
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn theta_dim(&self) -> usize {
        4
    }

    fn strategy_state_dim(&self) -> usize {
        2
    }

    fn strategy_input_dim(&self) -> usize {
        1
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![0.0, SCREEN_CENTER, 0.0]
    }

    fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = x[0] + 4.0;
        out[1] = x[1] + x[2];
        out[2] = x[2] - 1.0 + 16.0 * u[0];
    }

    fn theta_into(&self, x: &[f64], out: &mut [f64]) {
        self.theta_at(x[0], x[0], out);
    }

    fn forecast_into(&self, x: &[f64], n: usize, out: &mut Vec<f64>) -> bool {
        out.clear();
        let mut padded = false;
        let mut theta = [0.0; 4];
        for j in 0..=n {
            padded |= self.theta_at(x[0], x[0] + 4.0 * j as f64, &mut theta);
            out.extend_from_slice(&theta);
        }
        padded
    }

    fn input_space(&self) -> &InputSpace {
        &self.input_space
    }

    fn coord_dim(&self) -> usize {
        4
    }

    fn coords_into(&self, x: &[f64], out: &mut [f64]) {
        let offset = x[1] - self.gap_centerline(x[0]);
        out[0] = offset;
        // Next-step offset; bounding it by the same band keeps the vertical
        // rate pointing inward on the band's faces.
        out[1] = offset + x[2];
        out[2] = x[2];
        out[3] = x[1];
    }

    fn env_bounds_into(&self, x: &[f64], out: &mut [(f64, f64)]) {
        // The physical gap constraint applies whenever the bird overlaps a
        // pipe horizontally, visible or not.
        let c = self.gap_centerline(x[0]);
        let i = self
            .pipes
            .partition_point(|p| p.x + PIPE_WIDTH + BIRD_HALF < x[0]);
        let mut band = (-500.0, 500.0);
        if let Some(p) = self.pipes.get(i) {
            if x[0] >= p.x - BIRD_HALF && x[0] <= p.x + PIPE_WIDTH + BIRD_HALF {
                band = (p.center - GAP_BAND - c, p.center + GAP_BAND - c);
            }
        }
        out[0] = band;
        out[1] = (-520.0, 520.0);
        out[2] = (VY_MIN, VY_MAX);
        out[3] = (Y_MIN, Y_MAX);
    }

    fn project_state(&self, x: &[f64], out: &mut [f64]) {
        let upcoming = self.upcoming_visible(x[0], x[0]);
        for (slot, pipe) in upcoming.iter().enumerate() {
            let center = pipe.map(|p| p.center).unwrap_or(SCREEN_CENTER);
            out[slot] = center - x[1];
        }
    }

    fn project_input(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = u[0];
    }

    fn task_done(&self, x: &[f64]) -> bool {
        let last = &self.pipes[self.target_pipes - 1];
        x[0] > last.x + PIPE_WIDTH + 8.0
    }

    fn progress(&self, x: &[f64]) -> f64 {
        x[0]
    }

    fn demo_reference(&self, x: &[f64]) -> Option<f64> {
        Some(self.full_centerline(x[0]))
    }

    fn as_flappy(&self) -> Option<&FlappyEnv> {
        Some(self)
    }

    fn safety_input_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.tracking_input(x, SAFETY_HORIZON, Reference::VisibleCenterline);
    }

    fn sample_state_in(&self, bounds: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let span = self.pipes[self.target_pipes - 1].x;
        let x = (rng.gen_range(0.0..span) / 4.0).floor() * 4.0;
        let c = self.gap_centerline(x);
        let lo = (c + bounds[0].0).max(bounds[3].0);
        let hi = (c + bounds[0].1).min(bounds[3].1);
        let y = if lo <= hi {
            rng.gen_range(lo..=hi)
        } else {
            0.5 * (bounds[3].0 + bounds[3].1)
        };
        let offset = y - c;
        // Vertical rate inside both its own band and the next-step band.
        let vlo = bounds[2].0.max(bounds[1].0 - offset);
        let vhi = bounds[2].1.min(bounds[1].1 - offset);
        let vy = if vlo <= vhi {
            rng.gen_range(vlo..=vhi)
        } else {
            0.5 * (vlo + vhi)
        };
        vec![x, y, vy]
    }

    fn safe_core_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-18.0, 18.0), (-18.0, 18.0), (-9.0, 9.0), (196.0, 316.0)]
    }

    fn safe_max_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-32.0, 32.0), (-32.0, 32.0), (-12.0, 12.0), (40.0, 472.0)]
    }

    fn shipped_safe_bounds(&self) -> Vec<(f64, f64)> {
        vec![(-28.0, 28.0), (-28.0, 28.0), (-9.0, 9.0), (60.0, 452.0)]
    }

    fn to_spec_json(&self) -> String {
        let spec = FlappySpec {
            family: "flappy".into(),
            id: self.id.clone(),
            seed_provenance: self.seed_provenance,
            target_pipes: self.target_pipes,
            pipes: self.pipes.clone(),
        };
        serde_json::to_string(&spec).expect("flappy spec serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_env() -> FlappyEnv {
        FlappyEnv::generate_with_target(1, 0, 10)
    }

    #[test]
    fn flap_dynamics_are_exact() {
        let env = test_env();
        assert_eq!(env.step(&[0.0, 100.0, 0.0], &[1.0]), vec![4.0, 100.0, 15.0]);
    }

    #[test]
    fn gravity_accumulates_without_flaps() {
        let env = test_env();
        let mut x = vec![0.0, 0.0, 0.0];
        for _ in 0..3 {
            x = env.step(&x, &[0.0]);
        }
        assert_eq!(x[2], -3.0);
        assert_eq!(x[1], -3.0); // 0 + (-1) + (-2)
    }

    #[test]
    fn offscreen_pipes_are_withheld_from_the_forecast() {
        let env = test_env();
        // At x = 0 the first pipe (x = 400) is beyond the 232 px window.
        let mut theta = vec![0.0; 4];
        env.theta_into(&[0.0, 256.0, 0.0], &mut theta);
        assert_eq!(theta[0], SENTINEL_DX);
        assert_eq!(theta[1], SCREEN_CENTER);
        // Close enough, it appears.
        env.theta_into(&[200.0, 256.0, 0.0], &mut theta);
        assert!((theta[0] - (400.0 + 26.0 - 200.0)).abs() < 1e-12);
    }

    #[test]
    fn gap_constraint_applies_inside_pipe_span() {
        let env = test_env();
        let p = env.pipes()[0];
        let x_inside = p.x + 10.0;
        assert!(env.constraints_ok(&[x_inside, p.center, 0.0]));
        assert!(env.constraints_ok(&[x_inside, p.center + GAP_BAND, 0.0]));
        assert!(!env.constraints_ok(&[x_inside, p.center + GAP_BAND + 1.0, 0.0]));
        // Between pipes only the screen band applies.
        let x_between = p.x + PIPE_WIDTH + BIRD_HALF + 20.0;
        assert!(env.constraints_ok(&[x_between, p.center + GAP_BAND + 40.0, 0.0]));
    }

    #[test]
    fn centerline_is_flat_across_gaps_and_interpolates_between() {
        let env = test_env();
        let p0 = env.pipes()[0];
        let p1 = env.pipes()[1];
        let feasible_x = p0.x + 200.0; // ensure both pipes visible from here
        let (lo, hi) = env.visible_range(feasible_x);
        assert!(hi - lo >= 2, "expected at least two visible pipes");
        assert_eq!(env.gap_centerline(p0.x + 10.0), p0.center);
        assert_eq!(env.gap_centerline(p0.x + PIPE_WIDTH), p0.center);
        let mid = 0.5 * (p0.x + PIPE_WIDTH + p1.x);
        let c = env.gap_centerline(mid);
        assert!((c - 0.5 * (p0.center + p1.center)).abs() < 1e-9);
    }

    #[test]
    fn strategy_states_measure_gap_distances() {
        let env = test_env();
        let p0 = env.pipes()[0];
        // Close enough that the next two pipes are both on screen.
        let x = vec![p0.x - 50.0, 250.0, 0.0];
        let mut g = [0.0, 0.0];
        env.project_state(&x, &mut g);
        assert_eq!(g[0], p0.center - 250.0);
        assert_eq!(g[1], env.pipes()[1].center - 250.0);
    }

    #[test]
    fn safety_tracker_flaps_when_below_the_centerline() {
        let env = test_env();
        // Well below the reference and sinking: a flap must arrive within a
        // few steps.
        let mut x = vec![300.0, env.gap_centerline(300.0) - 60.0, -4.0];
        let mut flapped = false;
        for _ in 0..6 {
            let mut u = [0.0];
            env.safety_input_into(&x, &mut u);
            if u[0] == 1.0 {
                flapped = true;
                break;
            }
            x = env.step(&x, &u);
        }
        assert!(flapped);
    }

    #[test]
    fn spec_json_round_trips() {
        let env = test_env();
        let back = FlappyEnv::from_spec_json(&env.to_spec_json()).unwrap();
        assert_eq!(env.id(), back.id());
        assert_eq!(env.pipes().len(), back.pipes().len());
        assert_eq!(env.target_pipes(), back.target_pipes());
    }
}
