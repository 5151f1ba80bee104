//! Tube navigation: a double-integrator end effector steered along a
//! constant-width tube whose centerline has piecewise-constant slopes.
//!
//! State `[q0, q0_dot, y, y_dot]`, inputs `[q0_ddot, y_ddot]`. The strategy
//! states are the arc length travelled along the centerline and the signed
//! vertical offset from it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, EnvFamily, Environment, InputSpace};
use crate::rng;

pub const DT: f64 = 0.1;
pub const WIDTH: f64 = 0.4;
pub const V_MAX: f64 = 2.0;
pub const A_MAX: f64 = 2.0;
pub const SAFE_SPEED: f64 = 0.5;
/// Horizon (seconds) of the lookahead offset constraint coordinate.
pub const OFFSET_LOOKAHEAD: f64 = 0.3;
/// Centerline smoothing window (metres of `q0`).
pub const SMOOTH_WINDOW: f64 = 0.3;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Segment {
    pub slope: f64,
    pub length: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TubeSpec {
    family: String,
    id: String,
    segments: Vec<Segment>,
    width: f64,
    forecast_spacing: f64,
}

#[derive(Debug, Clone)]
pub struct TubeEnv {
    id: String,
    family: EnvFamily,
    segments: Vec<Segment>,
    /// Cumulative `q0` at segment starts, with a final entry at the end.
    q0_breaks: Vec<f64>,
    /// Centerline height at each breakpoint.
    y_breaks: Vec<f64>,
    /// Arc length along the centerline at each breakpoint.
    s_breaks: Vec<f64>,
    /// Integral of the centerline height at each breakpoint.
    i_breaks: Vec<f64>,
    width: f64,
    forecast_spacing: f64,
    input_space: InputSpace,
}

impl TubeEnv {
    pub fn new(id: String, family: EnvFamily, segments: Vec<Segment>, width: f64) -> Self {
        assert!(!segments.is_empty() && width > 0.0);
        let mut q0_breaks = Vec::with_capacity(segments.len() + 1);
        let mut y_breaks = Vec::with_capacity(segments.len() + 1);
        let mut s_breaks = Vec::with_capacity(segments.len() + 1);
        let mut i_breaks = Vec::with_capacity(segments.len() + 1);
        let (mut q0, mut y, mut s, mut integral) = (0.0, 0.0, 0.0, 0.0);
        q0_breaks.push(q0);
        y_breaks.push(y);
        s_breaks.push(s);
        i_breaks.push(integral);
        for seg in &segments {
            integral += y * seg.length + 0.5 * seg.slope * seg.length * seg.length;
            q0 += seg.length;
            y += seg.slope * seg.length;
            s += seg.length * (1.0 + seg.slope * seg.slope).sqrt();
            q0_breaks.push(q0);
            y_breaks.push(y);
            s_breaks.push(s);
            i_breaks.push(integral);
        }
        Self {
            id,
            family,
            segments,
            q0_breaks,
            y_breaks,
            s_breaks,
            i_breaks,
            width,
            forecast_spacing: 0.5,
            input_space: InputSpace::Box {
                lower: vec![-A_MAX, -A_MAX],
                upper: vec![A_MAX, A_MAX],
            },
        }
    }

    /// Random piecewise-constant tube: 8-15 segments, slopes in [-1, 1],
    /// lengths in [1, 3] m.
    pub fn generate(seed: u64, index: u64) -> Self {
        let mut rng = rng::stream(seed, "tube-gen", index);
        let n_segs = rng.gen_range(8..=15);
        let segments = (0..n_segs)
            .map(|_| Segment {
                slope: rng.gen_range(-1.0..1.0),
                length: rng.gen_range(1.0..3.0),
            })
            .collect();
        Self::new(format!("tube-{seed}-{index}"), EnvFamily::Tube, segments, WIDTH)
    }

    /// Curated sharp-curve tube: a long gentle straight to build speed,
    /// then short alternating near-maximal slopes.
    pub fn generate_sharp(seed: u64, index: u64) -> Self {
        let mut rng = rng::stream(seed, "tube-sharp-gen", index);
        let mut segments = vec![Segment {
            slope: rng.gen_range(-0.1..0.1),
            length: 6.0,
        }];
        let mut sign: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        for _ in 0..6 {
            segments.push(Segment {
                slope: sign * rng.gen_range(0.85..1.0),
                length: rng.gen_range(0.8..1.2),
            });
            sign = -sign;
        }
        segments.push(Segment {
            slope: 0.0,
            length: 2.0,
        });
        Self::new(
            format!("tube-sharp-{seed}-{index}"),
            EnvFamily::TubeSharp,
            segments,
            WIDTH,
        )
    }

    pub fn total_length(&self) -> f64 {
        *self.q0_breaks.last().unwrap()
    }

    fn segment_index(&self, q0: f64) -> usize {
        if q0 <= 0.0 {
            return 0;
        }
        let n = self.segments.len();
        match self
            .q0_breaks
            .partition_point(|b| *b <= q0)
        {
            0 => 0,
            i => (i - 1).min(n - 1),
        }
    }

    pub fn slope_at(&self, q0: f64) -> f64 {
        self.segments[self.segment_index(q0)].slope
    }

    /// Centerline height, extending end segments past both ends.
    pub fn centerline(&self, q0: f64) -> f64 {
        let i = self.segment_index(q0);
        self.y_breaks[i] + self.segments[i].slope * (q0 - self.q0_breaks[i])
    }

    /// Arc length along the centerline from the start.
    pub fn arc_length(&self, q0: f64) -> f64 {
        let i = self.segment_index(q0);
        let m = self.segments[i].slope;
        self.s_breaks[i] + (q0 - self.q0_breaks[i]) * (1.0 + m * m).sqrt()
    }

    /// Advances along the centerline by `arc` metres, returning the `q0`
    /// reached and whether the walk ran past the tube end.
    fn advance_arc(&self, q0: f64, arc: f64) -> (f64, bool) {
        let target = self.arc_length(q0) + arc;
        let total_s = *self.s_breaks.last().unwrap();
        if target > total_s {
            let m = self.segments.last().unwrap().slope;
            let extra = (target - total_s) / (1.0 + m * m).sqrt();
            return (self.total_length() + extra, true);
        }
        let i = match self.s_breaks.partition_point(|b| *b <= target) {
            0 => 0,
            i => (i - 1).min(self.segments.len() - 1),
        };
        let m = self.segments[i].slope;
        let q = self.q0_breaks[i] + (target - self.s_breaks[i]) / (1.0 + m * m).sqrt();
        (q, false)
    }

    /// Integral of the centerline height from the start to `q0`,
    /// extending end segments past both ends.
    fn centerline_integral(&self, q0: f64) -> f64 {
        let i = self.segment_index(q0);
        let d = q0 - self.q0_breaks[i];
        self.i_breaks[i] + self.y_breaks[i] * d + 0.5 * self.segments[i].slope * d * d
    }

    /// Moving average of the centerline over the smoothing window: the
    /// reference every offset in this module is measured against. The
    /// kinked line itself is not trackable by a bounded-acceleration
    /// system at speed; its moving average is.
    pub fn smooth_centerline(&self, q0: f64) -> f64 {
        let half = 0.5 * SMOOTH_WINDOW;
        (self.centerline_integral(q0 + half) - self.centerline_integral(q0 - half))
            / SMOOTH_WINDOW
    }

    /// Exact derivative of the smoothed centerline.
    pub fn smooth_slope(&self, q0: f64) -> f64 {
        let half = 0.5 * SMOOTH_WINDOW;
        (self.centerline(q0 + half) - self.centerline(q0 - half)) / SMOOTH_WINDOW
    }

    /// Signed offset from the smoothed centerline.
    pub fn offset(&self, x: &[f64]) -> f64 {
        x[2] - self.smooth_centerline(x[0])
    }

    /// Safe travel speed given how much the slope changes ahead: the
    /// vertical-acceleration budget has to cover the slope ramp.
    fn kink_speed_limit(&self, q0: f64) -> f64 {
        let m0 = self.smooth_slope(q0);
        let mut worst: f64 = 0.0;
        for d in [0.3, 0.6, 0.9] {
            worst = worst.max((self.smooth_slope(q0 + d) - m0).abs());
        }
        if worst < 1e-9 {
            f64::INFINITY
        } else {
            (0.40 / worst).sqrt().max(0.32)
        }
    }

    pub fn from_spec_json(text: &str) -> Result<Self, EnvError> {
        let spec: TubeSpec =
            serde_json::from_str(text).map_err(|e| EnvError::Parse(e.to_string()))?;
        let family = EnvFamily::parse(&spec.family)?;
        let mut env = Self::new(spec.id, family, spec.segments, spec.width);
        env.forecast_spacing = spec.forecast_spacing;
        Ok(env)
    }
}

impl Environment for TubeEnv {
    fn id(&self) -> &str {
        &self.id
    }

    fn family(&self) -> EnvFamily {
        self.family
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
        let m = self.smooth_slope(0.0);
        let q0_dot = SAFE_SPEED / (1.0 + m * m).sqrt();
        vec![0.0, q0_dot, self.smooth_centerline(0.0), m * q0_dot]
    }

    fn step_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = x[0] + DT * x[1] + 0.5 * DT * DT * u[0];
        out[1] = x[1] + DT * u[0];
        out[2] = x[2] + DT * x[3] + 0.5 * DT * DT * u[1];
        out[3] = x[3] + DT * u[1];
    }

    fn theta_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.slope_at(x[0]);
    }

    fn forecast_into(&self, x: &[f64], n: usize, out: &mut Vec<f64>) -> bool {
        out.clear();
        let mut q0 = x[0];
        let mut padded = q0 > self.total_length();
        out.push(self.slope_at(q0));
        for _ in 0..n {
            let (next, past_end) = self.advance_arc(q0, self.forecast_spacing);
            q0 = next;
            padded |= past_end;
            out.push(self.slope_at(q0));
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
        let m = self.smooth_slope(x[0]);
        let h = self.offset(x);
        let h_dot = x[3] - m * x[1];
        out[0] = h;
        // Lookahead offset: bounding it by the same band as the offset
        // forces the offset rate inward on the band's faces, which is what
        // makes a box of these coordinates invariant under the tracker.
        out[1] = h + OFFSET_LOOKAHEAD * h_dot;
        out[2] = h_dot;
        out[3] = x[1];
        out[4] = x[3];
    }

    fn env_bounds_into(&self, x: &[f64], out: &mut [(f64, f64)]) {
        // The walls bound the offset from the true (kinked) centerline;
        // expressed against the smoothed reference the band shifts by the
        // local smoothing deviation, keeping the check exact.
        let dev = self.smooth_centerline(x[0]) - self.centerline(x[0]);
        out[0] = (-0.5 * self.width - dev, 0.5 * self.width - dev);
        out[1] = (-2.0, 2.0);
        out[2] = (-2.0 * V_MAX, 2.0 * V_MAX);
        out[3] = (-V_MAX, V_MAX);
        out[4] = (-V_MAX, V_MAX);
    }

    fn project_state(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.arc_length(x[0]);
        out[1] = self.offset(x);
    }

    fn project_input(&self, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(u);
    }

    fn strategy_targets(&self, states: &[Vec<f64>], k: usize, t: usize) -> Vec<f64> {
        let ahead = &states[k + t];
        vec![
            self.arc_length(ahead[0]) - self.arc_length(states[k][0]),
            self.offset(ahead),
        ]
    }

    fn anchor_box(&self, x_k: &[f64], bounds: &mut [(f64, f64)]) {
        let s0 = self.arc_length(x_k[0]);
        bounds[0].0 += s0;
        bounds[0].1 += s0;
    }

    fn task_done(&self, x: &[f64]) -> bool {
        x[0] >= self.total_length()
    }

    fn progress(&self, x: &[f64]) -> f64 {
        self.arc_length(x[0])
    }

    fn demo_envelope_ok(&self, x: &[f64]) -> bool {
        self.offset(x).abs() <= 0.10 && x[1] >= 0.0 && x[1] <= 1.3
    }

    fn safety_input_into(&self, x: &[f64], out: &mut [f64]) {
        const K_V: f64 = 2.0;
        const K_H: f64 = 2.0;
        const K_DY: f64 = 8.0;
        // Slight forward evaluation so the vertical ramp starts early, and
        // a speed reference that respects upcoming slope changes.
        let m_ff = self.smooth_slope(x[0] + 0.15);
        let q0_dot_ref = (SAFE_SPEED / (1.0 + m_ff * m_ff).sqrt())
            .min(self.kink_speed_limit(x[0]));
        out[0] = (K_V * (q0_dot_ref - x[1])).clamp(-A_MAX, A_MAX);
        let h = self.offset(x);
        let y_dot_des = m_ff * x[1] - K_H * h;
        out[1] = (K_DY * (y_dot_des - x[3])).clamp(-A_MAX, A_MAX);
    }

    fn sample_state_in(&self, bounds: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let q0 = rng.gen_range(0.0..self.total_length() * 0.98);
        let m = self.smooth_slope(q0);
        let h = rng.gen_range(bounds[0].0..=bounds[0].1);
        let q0_dot = rng.gen_range(bounds[3].0..=bounds[3].1);
        // The offset rate must satisfy its own band, the lookahead band
        // given the sampled offset, and the y-rate band.
        let lo = bounds[2]
            .0
            .max((bounds[1].0 - h) / OFFSET_LOOKAHEAD)
            .max(bounds[4].0 - m * q0_dot);
        let hi = bounds[2]
            .1
            .min((bounds[1].1 - h) / OFFSET_LOOKAHEAD)
            .min(bounds[4].1 - m * q0_dot);
        let h_dot = if lo <= hi {
            rng.gen_range(lo..=hi)
        } else {
            0.5 * (lo + hi)
        };
        vec![
            q0,
            q0_dot,
            self.smooth_centerline(q0) + h,
            m * q0_dot + h_dot,
        ]
    }

    fn safe_core_bounds(&self) -> Vec<(f64, f64)> {
        vec![
            (-0.02, 0.02),
            (-0.02, 0.02),
            (-0.05, 0.05),
            (0.34, 0.52),
            (-0.8, 0.8),
        ]
    }

    fn safe_max_bounds(&self) -> Vec<(f64, f64)> {
        vec![
            (-0.16, 0.16),
            (-0.16, 0.16),
            (-0.9, 0.9),
            (0.05, 1.2),
            (-1.9, 1.9),
        ]
    }

    fn shipped_safe_bounds(&self) -> Vec<(f64, f64)> {
        vec![
            (-0.10, 0.10),
            (-0.10, 0.10),
            (-0.5, 0.5),
            (0.30, 0.75),
            (-1.6, 1.6),
        ]
    }

    fn to_spec_json(&self) -> String {
        let spec = TubeSpec {
            family: self.family.name().to_string(),
            id: self.id.clone(),
            segments: self.segments.clone(),
            width: self.width,
            forecast_spacing: self.forecast_spacing,
        };
        serde_json::to_string_pretty(&spec).expect("tube spec serialization cannot fail")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_tube() -> TubeEnv {
        TubeEnv::new(
            "flat".into(),
            EnvFamily::Tube,
            vec![Segment {
                slope: 0.0,
                length: 10.0,
            }],
            WIDTH,
        )
    }

    #[test]
    fn zero_input_from_rest_leaves_state_unchanged() {
        let env = flat_tube();
        let x = vec![1.0, 0.0, 0.1, 0.0];
        assert_eq!(env.step(&x, &[0.0, 0.0]), x);
    }

    #[test]
    fn constant_slope_forecast_is_constant() {
        let env = TubeEnv::new(
            "ramp".into(),
            EnvFamily::Tube,
            vec![Segment {
                slope: 0.6,
                length: 50.0,
            }],
            WIDTH,
        );
        let mut fc = Vec::new();
        let padded = env.forecast_into(&env.initial_state(), 10, &mut fc);
        assert!(!padded);
        assert_eq!(fc.len(), 11);
        assert!(fc.iter().all(|v| (*v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn forecast_past_end_pads_and_flags() {
        let env = flat_tube();
        let x = vec![9.8, 0.5, 0.0, 0.0];
        let mut fc = Vec::new();
        let padded = env.forecast_into(&x, 5, &mut fc);
        assert!(padded);
        assert_eq!(fc.len(), 6);
    }

    #[test]
    fn arc_length_accounts_for_slope() {
        let env = TubeEnv::new(
            "mixed".into(),
            EnvFamily::Tube,
            vec![
                Segment {
                    slope: 0.0,
                    length: 2.0,
                },
                Segment {
                    slope: 1.0,
                    length: 2.0,
                },
            ],
            WIDTH,
        );
        assert!((env.arc_length(2.0) - 2.0).abs() < 1e-12);
        assert!((env.arc_length(4.0) - (2.0 + 2.0 * 2.0f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn wall_band_decides_membership() {
        let env = flat_tube();
        // On the centerline at the safety speed.
        assert!(env.constraints_ok(&[1.0, 0.5, 0.0, 0.0]));
        // Outside the wall band.
        assert!(!env.constraints_ok(&[1.0, 0.5, 0.21, 0.0]));
        // Exactly on the wall: closed set.
        assert!(env.constraints_ok(&[1.0, 0.5, 0.2, 0.0]));
    }

    #[test]
    fn safety_law_is_quiet_on_the_centerline() {
        let env = flat_tube();
        let mut u = [0.0, 0.0];
        env.safety_input_into(&[1.0, SAFE_SPEED, 0.0, 0.0], &mut u);
        assert!(u[0].abs() < 1e-9);
        assert!(u[1].abs() < 1e-9);
    }

    #[test]
    fn safety_law_pushes_back_toward_centerline() {
        let env = flat_tube();
        let mut u = [0.0, 0.0];
        // Above the centerline: vertical acceleration must point down.
        env.safety_input_into(&[1.0, SAFE_SPEED, 0.1, 0.0], &mut u);
        assert!(u[1] < 0.0);
        // Below: must point up.
        env.safety_input_into(&[1.0, SAFE_SPEED, -0.1, 0.0], &mut u);
        assert!(u[1] > 0.0);
    }

    #[test]
    fn spec_json_round_trips() {
        let env = TubeEnv::generate(9, 3);
        let back = TubeEnv::from_spec_json(&env.to_spec_json()).unwrap();
        assert_eq!(env.id(), back.id());
        assert_eq!(env.total_length(), back.total_length());
        assert_eq!(env.slope_at(1.7), back.slope_at(1.7));
    }

    #[test]
    fn generated_tubes_are_reproducible() {
        let a = TubeEnv::generate(5, 2);
        let b = TubeEnv::generate(5, 2);
        assert_eq!(a.to_spec_json(), b.to_spec_json());
    }
}
