//! Curvilinear racing: a kinematic bicycle in track-aligned coordinates.
//!
//! State `[v_x, e_psi, s, e_y]` (speed, heading error, centerline distance,
//! lateral offset), inputs `[a, delta]`. The track is a curvature profile
//! `kappa(s)` on a uniform grid. Strategy states are the distance travelled
//! over the strategy window and the lateral offset.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvFamily, Environment, InputSpace};
use crate::rng;

pub const DT: f64 = 0.1;
pub const WHEELBASE: f64 = 0.3;
pub const LANE_HALF: f64 = 0.4;
pub const V_MAX: f64 = 10.0;
pub const A_MAX: f64 = 1.0;
pub const STEER_MAX: f64 = 0.5;
pub const SAFE_SPEED: f64 = 5.0;
pub const E_PSI_MAX: f64 = std::f64::consts::FRAC_PI_3;
/// Forecast sample spacing along the centerline, in metres.
pub const FORECAST_SPACING: f64 = 2.0;
/// Horizon (seconds) of the lookahead lateral-offset coordinate.
pub const LATERAL_LOOKAHEAD: f64 = 0.4;

const GRID_DS: f64 = 0.25;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrackSpec {
    family: String,
    id: String,
    grid_ds: f64,
    kappa: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrackEnv {
    id: String,
    /// Curvature samples every `GRID_DS` metres.
    kappa: Vec<f64>,
    total_len: f64,
    input_space: InputSpace,
}

impl TrackEnv {
    pub fn new(id: String, kappa: Vec<f64>) -> Self {
        assert!(kappa.len() >= 2);
        let total_len = (kappa.len() - 1) as f64 * GRID_DS;
        Self {
            id,
            kappa,
            total_len,
            input_space: InputSpace::Box {
                lower: vec![-A_MAX, -STEER_MAX],
                upper: vec![A_MAX, STEER_MAX],
            },
        }
    }

    /// Random track: alternating straights and constant-curvature arcs,
    /// box-smoothed into a continuous profile.
    pub fn generate(seed: u64, index: u64) -> Self {
        let mut rng = rng::stream(seed, "track-gen", index);
        let target_len = rng.gen_range(60.0..90.0);
        let mut raw = Vec::new();
        let mut s = 0.0;
        while s < target_len {
            let straight = rng.gen_range(4.0..10.0);
            let mut run = straight;
            while run > 0.0 && s < target_len {
                raw.push(0.0);
                s += GRID_DS;
                run -= GRID_DS;
            }
            let arc = rng.gen_range(3.0..8.0);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let k = sign * rng.gen_range(0.25..1.0);
            let mut run = arc;
            while run > 0.0 && s < target_len {
                raw.push(k);
                s += GRID_DS;
                run -= GRID_DS;
            }
        }
        // Smooth with a 1.5 m box filter so curvature ramps in and out.
        let half = (1.5 / GRID_DS / 2.0) as usize;
        let n = raw.len();
        let kappa: Vec<f64> = (0..n)
            .map(|i| {
                let lo = i.saturating_sub(half);
                let hi = (i + half).min(n - 1);
                raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
            })
            .collect();
        Self::new(format!("track-{seed}-{index}"), kappa)
    }

    pub fn total_length(&self) -> f64 {
        self.total_len
    }

    pub fn kappa_at(&self, s: f64) -> f64 {
        let pos = (s / GRID_DS).clamp(0.0, (self.kappa.len() - 1) as f64);
        let i = pos as usize;
        if i + 1 >= self.kappa.len() {
            return *self.kappa.last().unwrap();
        }
        let frac = pos - i as f64;
        self.kappa[i] * (1.0 - frac) + self.kappa[i + 1] * frac
    }

    /// Layout export: CSV of `(s, kappa)` samples.
    pub fn layout_csv(&self) -> String {
        let mut out = String::from("s,kappa\n");
        for (i, k) in self.kappa.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i as f64 * GRID_DS, k));
        }
        out
    }

    /// Loads a layout CSV, resampling onto the uniform internal grid.
    pub fn from_layout_csv(id: String, text: &str) -> Result<Self, EnvError> {
        let mut samples: Vec<(f64, f64)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('s') || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(',');
            let s: f64 = parts
                .next()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| EnvError::Parse(format!("bad s at line {}", i + 1)))?;
            let k: f64 = parts
                .next()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| EnvError::Parse(format!("bad kappa at line {}", i + 1)))?;
            samples.push((s, k));
        }
        if samples.len() < 2 {
            return Err(EnvError::Parse("layout needs at least two samples".into()));
        }
        samples.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total = samples.last().unwrap().0;
        let n = (total / GRID_DS).floor() as usize + 1;
        let mut kappa = Vec::with_capacity(n);
        let mut j = 0;
        for i in 0..n {
            let s = i as f64 * GRID_DS;
            while j + 1 < samples.len() && samples[j + 1].0 < s {
                j += 1;
            }
            let (s0, k0) = samples[j];
            let (s1, k1) = samples[(j + 1).min(samples.len() - 1)];
            let k = if s1 > s0 {
                let frac = ((s - s0) / (s1 - s0)).clamp(0.0, 1.0);
                k0 * (1.0 - frac) + k1 * frac
            } else {
                k0
            };
            kappa.push(k);
        }
        Ok(Self::new(id, kappa))
    }

    pub fn from_spec_json(text: &str) -> Result<Self, EnvError> {
        let spec: TrackSpec =
            serde_json::from_str(text).map_err(|e| EnvError::Parse(e.to_string()))?;
        if (spec.grid_ds - GRID_DS).abs() > 1e-12 {
            return Err(EnvError::Parse(format!(
                "unsupported grid spacing {}",
                spec.grid_ds
            )));
        }
        if spec.kappa.len() < 2 {
            return Err(EnvError::Parse("need at least two curvature samples".into()));
        }
        Ok(Self::new(spec.id, spec.kappa))
    }
}

impl Environment for TrackEnv {
    fn id(&self) -> &str {
        &self.id
    }

    fn family(&self) -> EnvFamily {
        EnvFamily::Track
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn theta_dim(&self) -> usize {
        1
    }

    fn strategy_state_dim(&self) -> usize {
        2
    }

    fn strategy_input_dim(&self) -> usize {
        2
    }

    fn initial_state(&self) -> Vec<f64> {
        vec![SAFE_SPEED, 0.0, 0.0, 0.0]
    }

    fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (vx, e_psi, s, e_y) = (x[0], x[1], x[2], x[3]);
        let kappa = self.kappa_at(s);
        let denom = (1.0 - e_y * kappa).max(0.2);
        let s_dot = vx * e_psi.cos() / denom;
        let delta = u[1].clamp(-0.55, 0.55);
        out[0] = vx + DT * u[0];
        out[1] = (e_psi + DT * (vx / WHEELBASE * delta.tan() - kappa * s_dot)).clamp(-1.5, 1.5);
        out[2] = s + DT * s_dot;
        out[3] = e_y + DT * vx * e_psi.sin();
    }

    fn theta_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.kappa_at(x[2]);
    }

    fn forecast_into(&self, x: &[f64], n: usize, out: &mut Vec<f64>) -> bool {
        out.clear();
        let mut padded = false;
        for j in 0..=n {
            let s = x[2] + FORECAST_SPACING * j as f64;
            if s > self.total_len {
                padded = true;
            }
            out.push(self.kappa_at(s));
        }
        padded
    }

    fn input_space(&self) -> &InputSpace {
        &self.input_space
    }

    fn coord_dim(&self) -> usize {
        5
    }

    fn coords_into(&self, x: &[f64], out: &mut [f64]) {
        let lateral_rate = x[0] * x[1].sin();
        out[0] = x[3];
        // Lookahead offset; see the tube family for why a box needs it.
        out[1] = x[3] + LATERAL_LOOKAHEAD * lateral_rate;
        out[2] = lateral_rate;
        out[3] = x[0];
        out[4] = x[1];
    }

    fn env_bounds_into(&self, _x: &[f64], out: &mut [(f64, f64)]) {
        out[0] = (-LANE_HALF, LANE_HALF);
        out[1] = (-4.0, 4.0);
        out[2] = (-9.0, 9.0);
        out[3] = (0.0, V_MAX);
        out[4] = (-E_PSI_MAX, E_PSI_MAX);
    }

    fn project_state(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[2];
        out[1] = x[3];
    }

    fn project_input(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(u);
    }

    fn strategy_targets(&self, states: &[Vec<f64>], k: usize, t: usize) -> Vec<f64> {
        let ahead = &states[k + t];
        vec![ahead[2] - states[k][2], ahead[3]]
    }

    fn anchor_box(&self, x_k: &[f64], bounds: &mut [(f64, f64)]) {
        bounds[0].0 += x_k[2];
        bounds[0].1 += x_k[2];
    }

    fn task_done(&self, x: &[f64]) -> bool {
        x[2] >= self.total_len
    }

    fn progress(&self, x: &[f64]) -> f64 {
        x[2]
    }

    fn demo_envelope_ok(&self, x: &[f64]) -> bool {
        x[0] <= 9.5
    }

    fn safety_input_into(&self, x: &[f64], out: &mut [f64]) {
        const K_V: f64 = 1.0;
        const K_EY: f64 = 0.15;
        const K_EPSI: f64 = 0.9;
        let (vx, e_psi, s, e_y) = (x[0], x[1], x[2], x[3]);
        out[0] = (K_V * (SAFE_SPEED - vx)).clamp(-A_MAX, A_MAX);
        let kappa = self.kappa_at(s);
        let ff = (WHEELBASE * kappa / (1.0 - e_y * kappa).max(0.2)).atan();
        let fb = -(K_EY * e_y + K_EPSI * e_psi) / vx.max(1.0);
        out[1] = (ff + fb).clamp(-STEER_MAX, STEER_MAX);
    }

    fn sample_state_in(&self, bounds: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = rng.gen_range(0.0..self.total_len * 0.95);
        let e_y = rng.gen_range(bounds[0].0..=bounds[0].1);
        let vx = rng.gen_range(bounds[3].0.max(0.1)..=bounds[3].1);
        // The lateral rate must satisfy its own band, the lookahead band
        // given the sampled offset, and the heading band at this speed.
        let lo = bounds[2]
            .0
            .max((bounds[1].0 - e_y) / LATERAL_LOOKAHEAD)
            .max(vx * bounds[4].0.sin());
        let hi = bounds[2]
            .1
            .min((bounds[1].1 - e_y) / LATERAL_LOOKAHEAD)
            .min(vx * bounds[4].1.sin());
        let lat = if lo <= hi {
            rng.gen_range(lo..=hi)
        } else {
            0.5 * (lo + hi)
        };
        let e_psi = (lat / vx).clamp(-1.0, 1.0).asin();
        vec![vx, e_psi, s, e_y]
    }

    fn safe_core_bounds(&self) -> Vec<(f64, f64)> {
        vec![
            (-0.03, 0.03),
            (-0.03, 0.03),
            (-0.1, 0.1),
            (4.6, 5.4),
            (-0.05, 0.05),
        ]
    }

    fn safe_max_bounds(&self) -> Vec<(f64, f64)> {
        vec![
            (-0.33, 0.33),
            (-0.33, 0.33),
            (-2.4, 2.4),
            (0.4, 9.8),
            (-0.9, 0.9),
        ]
    }

    fn shipped_safe_bounds(&self) -> Vec<(f64, f64)> {
        vec![
            (-0.24, 0.24),
            (-0.24, 0.24),
            (-1.2, 1.2),
            (1.4, 9.5),
            (-0.65, 0.65),
        ]
    }

    fn to_spec_json(&self) -> String {
        let spec = TrackSpec {
            family: "track".into(),
            id: self.id.clone(),
            grid_ds: GRID_DS,
            kappa: self.kappa.clone(),
        };
        serde_json::to_string(&spec).expect("track spec serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight_track() -> TrackEnv {
        TrackEnv::new("straight".into(), vec![0.0; 401])
    }

    #[test]
    fn constant_speed_straight_line_advances_s() {
        let env = straight_track();
        let x = env.step(&[5.0, 0.0, 0.0, 0.0], &[0.0, 0.0]);
        assert!((x[2] - 0.5).abs() < 1e-12);
        assert_eq!(x[0], 5.0);
        assert_eq!(x[3], 0.0);
    }

    #[test]
    fn lane_bound_decides_membership() {
        let env = straight_track();
        assert!(env.constraints_ok(&[5.0, 0.0, 1.0, 0.39]));
        assert!(env.constraints_ok(&[5.0, 0.0, 1.0, 0.4]));
        assert!(!env.constraints_ok(&[5.0, 0.0, 1.0, 0.41]));
    }

    #[test]
    fn forecast_reads_back_the_layout() {
        let env = TrackEnv::generate(4, 0);
        let mut fc = Vec::new();
        let padded = env.forecast_into(&env.initial_state(), 15, &mut fc);
        assert!(!padded);
        assert_eq!(fc.len(), 16);
        for (j, v) in fc.iter().enumerate() {
            assert_eq!(*v, env.kappa_at(FORECAST_SPACING * j as f64));
        }
    }

    #[test]
    fn layout_csv_round_trips() {
        let env = TrackEnv::generate(4, 1);
        let back = TrackEnv::from_layout_csv("copy".into(), &env.layout_csv()).unwrap();
        assert_eq!(env.kappa.len(), back.kappa.len());
        for (a, b) in env.kappa.iter().zip(&back.kappa) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn safety_law_feedforward_matches_curvature() {
        let env = TrackEnv::new("arc".into(), vec![0.5; 401]);
        let mut u = [0.0, 0.0];
        env.safety_input_into(&[SAFE_SPEED, 0.0, 10.0, 0.0], &mut u);
        assert!(u[0].abs() < 1e-9);
        assert!((u[1] - (WHEELBASE * 0.5f64).atan()).abs() < 1e-9);
    }

    #[test]
    fn generated_curvature_is_bounded_and_smooth() {
        for i in 0..5 {
            let env = TrackEnv::generate(11, i);
            for w in env.kappa.windows(2) {
                assert!(w[0].abs() <= 1.0);
                assert!((w[1] - w[0]).abs() < 0.2);
            }
        }
    }
}
