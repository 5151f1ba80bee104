//! Gaussian-process regression with a squared-exponential kernel.
//!
//! One `GpModel` approximates one scalar strategy output. Hyperparameters
//! are fitted by multi-start gradient ascent on the log marginal likelihood,
//! in log-parameter space with a backtracking line search. The regularized
//! Gram matrix is factorized once at fit time and cached, so online
//! prediction costs O(n) for the mean and O(n^2) for the variance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

/// Diagonal jitter added to the Gram matrix before factorization,
/// independent of the fitted noise variance.
pub const JITTER: f64 = 1e-8;

/// Smallest admissible noise variance during fitting.
pub const NOISE_FLOOR: f64 = 1e-10;

/// Log-parameter clamp range, as natural logs of the raw values.
const LOG_PARAM_MIN: f64 = -13.815510557964274; // ln 1e-6
const LOG_PARAM_MAX: f64 = 13.815510557964274; // ln 1e6

#[derive(Debug, Error)]
pub enum GpError {
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("need matching non-empty training data: |Z| = {n_inputs}, |y| = {n_outputs}")]
    BadTrainingData { n_inputs: usize, n_outputs: usize },

    #[error(
        "Gram matrix not positive definite after jitter {jitter:e} \
         (signal_variance {signal_variance:e}, noise_variance {noise_variance:e})"
    )]
    NotPositiveDefinite {
        jitter: f64,
        signal_variance: f64,
        noise_variance: f64,
    },

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),

    #[error("all {0} fitting restarts failed factorization")]
    FitFailed(usize),

    #[error("malformed model stream: {0}")]
    Parse(String),
}

/// Squared-exponential kernel hyperparameters with one length scale per
/// input dimension.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Hyperparams {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl Hyperparams {
    pub fn new(
        signal_variance: f64,
        length_scales: Vec<f64>,
        noise_variance: f64,
    ) -> Result<Self, GpError> {
        let hp = Self {
            signal_variance,
            length_scales,
            noise_variance,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.signal_variance > 0.0) || !self.signal_variance.is_finite() {
            return Err(GpError::InvalidHyperparams(format!(
                "signal_variance must be positive and finite, got {}",
                self.signal_variance
            )));
        }
        if self.length_scales.is_empty() {
            return Err(GpError::InvalidHyperparams(
                "need at least one length scale".into(),
            ));
        }
        if let Some(l) = self
            .length_scales
            .iter()
            .find(|l| !(**l > 0.0) || !l.is_finite())
        {
            return Err(GpError::InvalidHyperparams(format!(
                "length scales must be positive and finite, got {l}"
            )));
        }
        if !(self.noise_variance >= 0.0) || !self.noise_variance.is_finite() {
            return Err(GpError::InvalidHyperparams(format!(
                "noise_variance must be non-negative and finite, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.length_scales.len()
    }
}

/// Evaluates the squared-exponential kernel between two input vectors.
pub fn kernel_eval(z1: &[f64], z2: &[f64], hp: &Hyperparams) -> Result<f64, GpError> {
    if z1.len() != hp.input_dim() {
        return Err(GpError::DimensionMismatch {
            expected: hp.input_dim(),
            got: z1.len(),
        });
    }
    if z2.len() != hp.input_dim() {
        return Err(GpError::DimensionMismatch {
            expected: hp.input_dim(),
            got: z2.len(),
        });
    }
    Ok(kernel_unchecked(z1, z2, hp))
}

#[inline]
fn kernel_unchecked(z1: &[f64], z2: &[f64], hp: &Hyperparams) -> f64 {
    let mut q = 0.0;
    for m in 0..z1.len() {
        let d = (z1[m] - z2[m]) / hp.length_scales[m];
        q += d * d;
    }
    hp.signal_variance * (-0.5 * q).exp()
}

/// Training inputs in row-major storage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl InputMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GpError> {
        let n = rows.len();
        if n == 0 {
            return Err(GpError::BadTrainingData {
                n_inputs: 0,
                n_outputs: 0,
            });
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(n * cols);
        for r in rows {
            if r.len() != cols {
                return Err(GpError::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: n,
            cols,
            data,
        })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Gram matrix of the noise-free kernel.
fn gram(z: &InputMatrix, hp: &Hyperparams) -> DMatrix<f64> {
    let n = z.rows;
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel_unchecked(z.row(i), z.row(j), hp);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn regularized_cholesky(
    z: &InputMatrix,
    hp: &Hyperparams,
) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>), GpError> {
    let k = gram(z, hp);
    let mut kbar = k.clone();
    let ridge = hp.noise_variance + JITTER;
    for i in 0..z.rows {
        kbar[(i, i)] += ridge;
    }
    let chol = kbar.cholesky().ok_or(GpError::NotPositiveDefinite {
        jitter: JITTER,
        signal_variance: hp.signal_variance,
        noise_variance: hp.noise_variance,
    })?;
    Ok((k, chol))
}

/// Log marginal likelihood of `y` under the kernel with hyperparameters
/// `hp`, using the jittered Gram matrix.
pub fn log_marginal_likelihood(
    z: &InputMatrix,
    y: &[f64],
    hp: &Hyperparams,
) -> Result<f64, GpError> {
    check_data(z, y, hp)?;
    let (_, chol) = regularized_cholesky(z, hp)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    Ok(lml_from_parts(&yv, &alpha, &chol))
}

fn lml_from_parts(y: &DVector<f64>, alpha: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let n = y.len() as f64;
    let data_fit = -0.5 * y.dot(alpha);
    let l = chol.l_dirty();
    let log_det_half: f64 = (0..y.len()).map(|i| l[(i, i)].ln()).sum();
    data_fit - log_det_half - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

fn check_data(z: &InputMatrix, y: &[f64], hp: &Hyperparams) -> Result<(), GpError> {
    if z.rows != y.len() || z.rows == 0 {
        return Err(GpError::BadTrainingData {
            n_inputs: z.rows,
            n_outputs: y.len(),
        });
    }
    if z.cols != hp.input_dim() {
        return Err(GpError::DimensionMismatch {
            expected: hp.input_dim(),
            got: z.cols,
        });
    }
    Ok(())
}

/// Gradient of the log marginal likelihood in log-parameter space, ordered
/// as (log signal_variance, log length_scales..., log noise_variance).
pub fn lml_gradient(z: &InputMatrix, y: &[f64], hp: &Hyperparams) -> Result<Vec<f64>, GpError> {
    check_data(z, y, hp)?;
    let (k, chol) = regularized_cholesky(z, hp)?;
    let yv = DVector::from_column_slice(y);
    let alpha = chol.solve(&yv);
    let kinv = chol.inverse();
    let n = z.rows;
    let d = z.cols;

    // A = 0.5 (alpha alpha^T - Kbar^{-1}); dL/dtheta = tr(A dKbar/dtheta).
    // Fold the Hadamard products into explicit loops to avoid temporaries.
    let mut grad = vec![0.0; d + 2];

    // d Kbar / d log sigma_f^2 = K.
    let mut g_sf = 0.0;
    for i in 0..n {
        for j in 0..n {
            let a = 0.5 * (alpha[i] * alpha[j] - kinv[(i, j)]);
            g_sf += a * k[(i, j)];
        }
    }
    grad[0] = g_sf;

    // d Kbar / d log l_m = K .* D_m / l_m^2 with D_m the squared
    // per-dimension differences.
    for m in 0..d {
        let lm2 = hp.length_scales[m] * hp.length_scales[m];
        let mut g = 0.0;
        for i in 0..n {
            let zi = z.row(i)[m];
            for j in 0..n {
                let diff = zi - z.row(j)[m];
                let a = 0.5 * (alpha[i] * alpha[j] - kinv[(i, j)]);
                g += a * k[(i, j)] * diff * diff / lm2;
            }
        }
        grad[1 + m] = g;
    }

    // d Kbar / d log sigma_n^2 = sigma_n^2 I.
    let mut tr = 0.0;
    for i in 0..n {
        tr += 0.5 * (alpha[i] * alpha[i] - kinv[(i, i)]);
    }
    grad[d + 1] = hp.noise_variance * tr;

    Ok(grad)
}

/// Fitting configuration: restart count, gradient steps per restart, and
/// the seed all restarts derive from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct FitConfig {
    pub restarts: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            iterations: 60,
            seed: 0,
        }
    }
}

/// A fitted Gaussian process: training data, hyperparameters, and the
/// cached factorization of the regularized Gram matrix.
///
/// Immutable after `fit`; safe to share across threads.
#[derive(Debug, Clone)]
pub struct GpModel {
    z: InputMatrix,
    y: Vec<f64>,
    hyperparams: Hyperparams,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
    log_marginal: f64,
}

impl GpModel {
    /// Builds a model at fixed hyperparameters.
    pub fn with_hyperparams(
        z: InputMatrix,
        y: Vec<f64>,
        hyperparams: Hyperparams,
    ) -> Result<Self, GpError> {
        hyperparams.validate()?;
        check_data(&z, &y, &hyperparams)?;
        let (_, chol) = regularized_cholesky(&z, &hyperparams)?;
        let yv = DVector::from_column_slice(&y);
        let weights = chol.solve(&yv);
        let log_marginal = lml_from_parts(&yv, &weights, &chol);
        Ok(Self {
            z,
            y,
            hyperparams,
            chol,
            weights,
            log_marginal,
        })
    }

    /// Fits hyperparameters by multi-start gradient ascent on the log
    /// marginal likelihood. Deterministic for a given seed; ties between
    /// restarts break toward the lowest restart index.
    pub fn fit(z: InputMatrix, y: Vec<f64>, config: &FitConfig) -> Result<Self, GpError> {
        if z.rows != y.len() || z.rows < 2 {
            return Err(GpError::BadTrainingData {
                n_inputs: z.rows,
                n_outputs: y.len(),
            });
        }
        let restarts = config.restarts.max(1);
        let inits: Vec<Vec<f64>> = (0..restarts)
            .map(|r| initial_log_params(&z, &y, config.seed, r))
            .collect();

        use rayon::prelude::*;
        let results: Vec<Option<(f64, Vec<f64>)>> = inits
            .par_iter()
            .map(|init| ascend(&z, &y, init, config.iterations))
            .collect();

        let mut best: Option<(f64, &Vec<f64>)> = None;
        for r in results.iter().flatten() {
            let better = match &best {
                None => true,
                Some((b, _)) => r.0 > *b,
            };
            if better {
                best = Some((r.0, &r.1));
            }
        }
        let (_, log_params) = best.ok_or(GpError::FitFailed(restarts))?;
        let hp = hyperparams_from_log(log_params, z.cols);
        Self::with_hyperparams(z, y, hp)
    }

    /// Predictive mean and standard deviation at a query input.
    pub fn predict(&self, query: &[f64]) -> Result<(f64, f64), GpError> {
        if query.len() != self.z.cols {
            return Err(GpError::DimensionMismatch {
                expected: self.z.cols,
                got: query.len(),
            });
        }
        let n = self.z.rows;
        let mut kvec = DVector::zeros(n);
        for i in 0..n {
            kvec[i] = kernel_unchecked(query, self.z.row(i), &self.hyperparams);
        }
        let mean = kvec.dot(&self.weights);
        // var = k(z,z) - v^T v with L v = k.
        let l = self.chol.l_dirty();
        let mut v = kvec;
        l.solve_lower_triangular_mut(&mut v);
        let prior = self.hyperparams.signal_variance;
        let var = (prior - v.dot(&v)).max(0.0);
        Ok((mean, var.sqrt()))
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyperparams
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }

    pub fn training_inputs(&self) -> &InputMatrix {
        &self.z
    }

    pub fn training_outputs(&self) -> &[f64] {
        &self.y
    }

    pub fn input_dim(&self) -> usize {
        self.z.cols
    }

    /// Serializes the model as a self-describing JSON document.
    pub fn to_json(&self) -> String {
        let doc = ModelDoc {
            format_version: 1,
            hyperparams: self.hyperparams.clone(),
            z: self.z.clone(),
            y: self.y.clone(),
            jitter: JITTER,
        };
        serde_json::to_string(&doc).expect("model serialization cannot fail")
    }

    /// Restores a model from `to_json` output. The factorization is rebuilt
    /// from the stored data, so predictions round-trip bit-for-bit.
    pub fn from_json(text: &str) -> Result<Self, GpError> {
        let doc: ModelDoc = serde_json::from_str(text).map_err(|e| GpError::Parse(e.to_string()))?;
        if doc.format_version != 1 {
            return Err(GpError::Parse(format!(
                "unsupported format_version {}",
                doc.format_version
            )));
        }
        if doc.z.data.len() != doc.z.rows * doc.z.cols {
            return Err(GpError::Parse(format!(
                "input matrix claims {}x{} but holds {} values",
                doc.z.rows,
                doc.z.cols,
                doc.z.data.len()
            )));
        }
        Self::with_hyperparams(doc.z, doc.y, doc.hyperparams)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDoc {
    format_version: u32,
    hyperparams: Hyperparams,
    z: InputMatrix,
    y: Vec<f64>,
    jitter: f64,
}

fn hyperparams_from_log(log_params: &[f64], dim: usize) -> Hyperparams {
    Hyperparams {
        signal_variance: log_params[0].exp(),
        length_scales: log_params[1..1 + dim].iter().map(|p| p.exp()).collect(),
        noise_variance: log_params[dim + 1].exp().max(NOISE_FLOOR),
    }
}

fn initial_log_params(z: &InputMatrix, y: &[f64], seed: u64, restart: usize) -> Vec<f64> {
    let d = z.cols;
    if restart == 0 {
        // Heuristic start: per-column input spread and output variance.
        let n = z.rows as f64;
        let var_y = {
            let mean = y.iter().sum::<f64>() / n;
            (y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).max(1e-4)
        };
        let mut p = Vec::with_capacity(d + 2);
        p.push(var_y.ln());
        for m in 0..d {
            let col_mean = (0..z.rows).map(|i| z.row(i)[m]).sum::<f64>() / n;
            let col_var =
                (0..z.rows).map(|i| (z.row(i)[m] - col_mean).powi(2)).sum::<f64>() / n;
            p.push(col_var.sqrt().max(1e-2).ln());
        }
        p.push((0.01 * var_y).ln());
        return p;
    }
    let mut rng = rng::stream(seed, "gp-fit-restart", restart as u64);
    let mut p = Vec::with_capacity(d + 2);
    let lo = (1e-2f64).ln();
    let hi = (1e2f64).ln();
    for _ in 0..d + 2 {
        p.push(rng.gen_range(lo..hi));
    }
    p
}

/// Gradient ascent with a backtracking (Armijo) line search; returns the
/// best log-parameter vector and its likelihood, or None if even the
/// starting point fails factorization.
fn ascend(z: &InputMatrix, y: &[f64], init: &[f64], iterations: usize) -> Option<(f64, Vec<f64>)> {
    let d = z.cols;
    let eval = |p: &[f64]| -> Option<f64> {
        let hp = hyperparams_from_log(p, d);
        log_marginal_likelihood(z, y, &hp).ok().filter(|v| v.is_finite())
    };
    let mut params: Vec<f64> = init
        .iter()
        .map(|p| p.clamp(LOG_PARAM_MIN, LOG_PARAM_MAX))
        .collect();
    let mut value = eval(&params)?;

    for _ in 0..iterations {
        let hp = hyperparams_from_log(&params, d);
        let grad = match lml_gradient(z, y, &hp) {
            Ok(g) if g.iter().all(|v| v.is_finite()) => g,
            _ => break,
        };
        let g_norm2: f64 = grad.iter().map(|g| g * g).sum();
        if g_norm2.sqrt() < 1e-6 {
            break;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..24 {
            let candidate: Vec<f64> = params
                .iter()
                .zip(&grad)
                .map(|(p, g)| (p + step * g).clamp(LOG_PARAM_MIN, LOG_PARAM_MAX))
                .collect();
            if let Some(v) = eval(&candidate) {
                if v >= value + 1e-4 * step * g_norm2 {
                    params = candidate;
                    value = v;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Some((value, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hp(sf2: f64, ls: &[f64], sn2: f64) -> Hyperparams {
        Hyperparams::new(sf2, ls.to_vec(), sn2).unwrap()
    }

    fn three_point_data() -> (InputMatrix, Vec<f64>) {
        let z = InputMatrix::from_rows(&[
            vec![0.1, -0.4, 1.2],
            vec![0.9, 0.3, -0.2],
            vec![-1.1, 0.8, 0.5],
        ])
        .unwrap();
        (z, vec![0.7, -0.3, 1.4])
    }

    #[test]
    fn kernel_at_identical_inputs_is_signal_variance() {
        let h = hp(1.0, &[0.7, 2.0], 0.0);
        let z = [0.3, -1.2];
        assert_eq!(kernel_eval(&z, &z, &h).unwrap(), 1.0);
    }

    #[test]
    fn kernel_one_length_scale_apart() {
        let h = hp(1.0, &[0.5, 1.0, 2.0], 0.0);
        let z1 = [0.5, 0.0, 0.0];
        let z2 = [0.0, 0.0, 0.0];
        let v = kernel_eval(&z1, &z2, &h).unwrap();
        assert!((v - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn kernel_matches_elementwise_formula() {
        let h = hp(2.3, &[0.7, 1.3, 0.4], 0.0);
        let z1 = [0.2, -0.9, 1.7];
        let z2 = [-0.5, 0.1, 0.8];
        let mut q = 0.0;
        for m in 0..3 {
            q += (z1[m] - z2[m]) * (z1[m] - z2[m]) / (h.length_scales[m] * h.length_scales[m]);
        }
        let expected = 2.3 * (-0.5 * q).exp();
        assert!((kernel_eval(&z1, &z2, &h).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn kernel_rejects_dimension_mismatch() {
        let h = hp(1.0, &[1.0, 1.0], 0.0);
        assert!(matches!(
            kernel_eval(&[0.0], &[0.0, 1.0], &h),
            Err(GpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn lml_single_point_closed_form() {
        let z = InputMatrix::from_rows(&[vec![0.0]]).unwrap();
        let h = hp(1.0, &[1.0], 0.0);
        let got = log_marginal_likelihood(&z, &[0.0], &h).unwrap();
        let expected = -0.5 * (1.0 + JITTER).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((got - expected).abs() < 1e-14);
    }

    #[test]
    fn lml_zero_outputs_is_pure_complexity_term() {
        let (z, _) = three_point_data();
        let h = hp(1.7, &[0.9, 1.1, 0.6], 0.3);
        let y = vec![0.0; 3];
        let got = log_marginal_likelihood(&z, &y, &h).unwrap();

        let (_, chol) = regularized_cholesky(&z, &h).unwrap();
        let l = chol.l_dirty();
        let log_det_half: f64 = (0..3).map(|i| l[(i, i)].ln()).sum();
        let expected = -log_det_half - 1.5 * (2.0 * std::f64::consts::PI).ln();
        assert_eq!(got, expected);
    }

    fn finite_difference_gradient(z: &InputMatrix, y: &[f64], h: &Hyperparams) -> Vec<f64> {
        let d = z.cols;
        let mut log_params = Vec::with_capacity(d + 2);
        log_params.push(h.signal_variance.ln());
        for l in &h.length_scales {
            log_params.push(l.ln());
        }
        log_params.push(h.noise_variance.ln());
        let step = 1e-5;
        (0..d + 2)
            .map(|j| {
                let mut up = log_params.clone();
                up[j] += step;
                let mut dn = log_params.clone();
                dn[j] -= step;
                let f_up =
                    log_marginal_likelihood(z, y, &hyperparams_from_log(&up, d)).unwrap();
                let f_dn =
                    log_marginal_likelihood(z, y, &hyperparams_from_log(&dn, d)).unwrap();
                (f_up - f_dn) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (z, y) = three_point_data();
        let h = hp(1.3, &[0.8, 1.4, 0.5], 0.2);
        let grad = lml_gradient(&z, &y, &h).unwrap();
        let fd = finite_difference_gradient(&z, &y, &h);
        for (g, f) in grad.iter().zip(&fd) {
            let scale = f.abs().max(1e-8);
            assert!(
                (g - f).abs() / scale < 1e-5,
                "analytic {g} vs finite difference {f}"
            );
        }
    }

    #[test]
    fn gradient_zero_outputs_matches_complexity_only_differences() {
        let (z, _) = three_point_data();
        let y = vec![0.0; 3];
        let h = hp(0.9, &[1.2, 0.7, 1.5], 0.4);
        let grad = lml_gradient(&z, &y, &h).unwrap();
        let fd = finite_difference_gradient(&z, &y, &h);
        for (g, f) in grad.iter().zip(&fd) {
            assert!((g - f).abs() < 1e-6, "analytic {g} vs trace-only {f}");
        }
    }

    #[test]
    fn gradient_single_point_length_scales_vanish() {
        let z = InputMatrix::from_rows(&[vec![0.4, -0.6]]).unwrap();
        let h = hp(1.0, &[0.9, 1.3], 0.1);
        let grad = lml_gradient(&z, &[0.5], &h).unwrap();
        assert_eq!(grad[1], 0.0);
        assert_eq!(grad[2], 0.0);
    }

    #[test]
    fn predict_interpolates_training_points_without_noise() {
        let (z, y) = three_point_data();
        let model = GpModel::with_hyperparams(z, y.clone(), hp(1.0, &[1.0, 1.0, 1.0], 0.0)).unwrap();
        for i in 0..3 {
            let (mean, std) = model.predict(model.z.row(i).to_vec().as_slice()).unwrap();
            assert!((mean - y[i]).abs() < 1e-6);
            assert!(std <= 1e-4, "std {std} too large at a training input");
        }
    }

    #[test]
    fn predict_reverts_to_prior_far_away() {
        let (z, y) = three_point_data();
        let h = hp(2.0, &[1.0, 1.0, 1.0], 0.0);
        let model = GpModel::with_hyperparams(z, y, h).unwrap();
        let (mean, std) = model.predict(&[100.0, -100.0, 100.0]).unwrap();
        assert!(mean.abs() < 1e-9);
        assert!((std - 2.0f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn fit_is_deterministic() {
        let (z, y) = three_point_data();
        let config = FitConfig {
            restarts: 2,
            iterations: 30,
            seed: 11,
        };
        let a = GpModel::fit(z.clone(), y.clone(), &config).unwrap();
        let b = GpModel::fit(z, y, &config).unwrap();
        assert_eq!(a.hyperparams(), b.hyperparams());
    }

    #[test]
    fn fit_absorbs_contradictory_duplicates_with_noise() {
        let z = InputMatrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 1.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        let y = vec![1.0, -1.0, 0.5, -0.5];
        let model = GpModel::fit(z, y, &FitConfig::default()).unwrap();
        assert!(model.hyperparams().noise_variance > NOISE_FLOOR);
    }

    #[test]
    fn fit_recovers_at_least_generating_likelihood() {
        // Sample from a known prior, then check the fitted likelihood beats
        // the generating hyperparameters.
        let truth = hp(1.5, &[0.8], 0.05);
        let mut rng = rng::stream(3, "gp-prior-sample", 0);
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 * 0.4 - 2.0]).collect();
        let z = InputMatrix::from_rows(&rows).unwrap();
        let (_, chol) = regularized_cholesky(&z, &truth).unwrap();
        let normals = DVector::from_iterator(
            12,
            (0..12).map(|_| {
                // Box-Muller keeps this free of distribution-crate details.
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            }),
        );
        let y_vec = chol.l() * normals;
        let y: Vec<f64> = y_vec.iter().copied().collect();

        let fitted = GpModel::fit(z.clone(), y.clone(), &FitConfig::default()).unwrap();
        let lml_truth = log_marginal_likelihood(&z, &y, &truth).unwrap();
        assert!(fitted.log_marginal() >= lml_truth - 1e-6);
    }

    #[test]
    fn serialization_round_trips_predictions_bitwise() {
        let (z, y) = three_point_data();
        let model = GpModel::fit(z, y, &FitConfig::default()).unwrap();
        let text = model.to_json();
        let restored = GpModel::from_json(&text).unwrap();
        let queries = [
            vec![0.0, 0.0, 0.0],
            vec![0.5, -0.5, 0.9],
            vec![-2.0, 1.0, 0.3],
        ];
        for q in &queries {
            let (m1, s1) = model.predict(q).unwrap();
            let (m2, s2) = restored.predict(q).unwrap();
            assert_eq!(m1.to_bits(), m2.to_bits());
            assert_eq!(s1.to_bits(), s2.to_bits());
        }
    }

    #[test]
    fn deserialize_rejects_malformed_stream() {
        assert!(matches!(
            GpModel::from_json("{\"format_version\":1"),
            Err(GpError::Parse(_))
        ));
        assert!(GpModel::from_json("{\"format_version\":9,\"hyperparams\":{\"signal_variance\":1.0,\"length_scales\":[1.0],\"noise_variance\":0.0},\"z\":{\"rows\":1,\"cols\":1,\"data\":[0.0]},\"y\":[0.0],\"jitter\":1e-8}").is_err());
    }
}
