//! Gaussian-process regression with a squared-exponential kernel, and the
//! expected-improvement acquisition for minimization.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::error::{AcllError, Result};

pub const DEFAULT_LENGTH_SCALE: f64 = 0.2;
pub const DEFAULT_NOISE_VARIANCE: f64 = 1e-6;
/// Floor for the signal variance when all observed targets coincide.
pub const MIN_SIGNAL_VARIANCE: f64 = 1e-8;

const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl GpHyper {
    /// Fixed length scale and noise; signal variance is the (population)
    /// variance of the targets.
    pub fn for_targets(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        GpHyper {
            length_scale: DEFAULT_LENGTH_SCALE,
            signal_variance: var.max(MIN_SIGNAL_VARIANCE),
            noise_variance: DEFAULT_NOISE_VARIANCE,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.length_scale.is_finite()
            && self.length_scale > 0.0
            && self.signal_variance.is_finite()
            && self.signal_variance > 0.0
            && self.noise_variance.is_finite()
            && self.noise_variance >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(AcllError::InvalidSpec(format!("invalid GP hyperparameters {self:?}")))
        }
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_variance * (-sq / (2.0 * self.length_scale * self.length_scale)).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    hyper: GpHyper,
    prior_mean: f64,
    /// Row-major lower Cholesky factor of `K + (noise + jitter) I`.
    chol: Vec<f64>,
    /// `(K + noise I)^-1 (y - prior_mean)`.
    alpha: Vec<f64>,
    jitter: f64,
}

pub fn fit_gp(points: &[Vec<f64>], values: &[f64], hyper: GpHyper) -> Result<GpModel> {
    hyper.validate()?;
    if points.is_empty() {
        return Err(AcllError::InvalidData("a GP needs at least one observation".into()));
    }
    if points.len() != values.len() {
        return Err(AcllError::Shape(format!("{} points but {} values", points.len(), values.len())));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d || p.iter().any(|v| !(0.0..=1.0).contains(v))) {
        return Err(AcllError::InvalidData("GP inputs must share one dimension and lie in [0, 1]".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AcllError::InvalidData("GP targets must be finite".into()));
    }

    let n = points.len();
    let mut gram = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let k = hyper.kernel(&points[i], &points[j]);
            gram[i * n + j] = k;
            gram[j * n + i] = k;
        }
    }
    let mut jitter = 0.0;
    let chol = loop {
        let mut a = gram.clone();
        for i in 0..n {
            a[i * n + i] += hyper.noise_variance + jitter;
        }
        if let Some(l) = cholesky(a, n) {
            break l;
        }
        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        if jitter > JITTER_MAX * (1.0 + 1e-9) {
            return Err(AcllError::Conditioning { jitter: jitter / 10.0 });
        }
    };

    let prior_mean = values.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = values.iter().map(|v| v - prior_mean).collect();
    let alpha = back_substitute(&chol, n, &forward_substitute(&chol, n, &centered));
    Ok(GpModel {
        inputs: points.to_vec(),
        targets: values.to_vec(),
        hyper,
        prior_mean,
        chol,
        alpha,
        jitter,
    })
}

impl GpModel {
    /// Posterior mean and variance of the latent function at `x`.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let n = self.inputs.len();
        let kx: Vec<f64> = self.inputs.iter().map(|p| self.hyper.kernel(p, x)).collect();
        let mean = self.prior_mean + kx.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>();
        let v = forward_substitute(&self.chol, n, &kx);
        let var = self.hyper.signal_variance - v.iter().map(|e| e * e).sum::<f64>();
        (mean, var.max(0.0))
    }

    pub fn hyper(&self) -> GpHyper {
        self.hyper
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    /// Diagonal jitter that was needed for the factorization (0 if none).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn best_target(&self) -> f64 {
        self.targets.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

pub fn expected_improvement(model: &GpModel, x: &[f64], best_value: f64) -> f64 {
    let (mean, var) = model.posterior(x);
    ei_from_moments(mean, var, best_value)
}

/// EI for minimization given posterior moments.
pub fn ei_from_moments(mean: f64, variance: f64, best_value: f64) -> f64 {
    let gap = best_value - mean;
    let sigma = variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return gap.max(0.0);
    }
    let z = gap / sigma;
    (gap * normal_cdf(z) + sigma * normal_pdf(z)).max(0.0)
}

/// Natural log of the expected improvement; `-inf` where EI is exactly 0.
/// Stays finite and ordered far into the tail where EI itself underflows.
pub fn log_expected_improvement(model: &GpModel, x: &[f64], best_value: f64) -> f64 {
    let (mean, var) = model.posterior(x);
    log_ei_from_moments(mean, var, best_value)
}

pub fn log_ei_from_moments(mean: f64, variance: f64, best_value: f64) -> f64 {
    let gap = best_value - mean;
    let sigma = variance.max(0.0).sqrt();
    if sigma == 0.0 {
        return if gap > 0.0 { gap.ln() } else { f64::NEG_INFINITY };
    }
    sigma.ln() + log_h(gap / sigma)
}

/// `ln(z Φ(z) + φ(z))`.
fn log_h(z: f64) -> f64 {
    const TAIL: f64 = -25.0;
    if z > TAIL {
        return (z * normal_cdf(z) + normal_pdf(z)).ln();
    }
    // h(z) = φ(z) / x² · (1 - 3/x² + 15/x⁴ - 105/x⁶ + ...), x = -z.
    let x2 = z * z;
    let series = 1.0 - 3.0 / x2 + 15.0 / (x2 * x2) - 105.0 / (x2 * x2 * x2);
    -0.5 * x2 - 0.5 * (2.0 * PI).ln() - x2.ln() + series.ln()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn cholesky(mut a: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        if !diag.is_finite() || diag <= 0.0 {
            return None;
        }
        let djj = diag.sqrt();
        a[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / djj;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Some(a)
}

/// Solves `L y = b`.
fn forward_substitute(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    y
}

/// Solves `L^T x = y`.
fn back_substitute(l: &[f64], n: usize, y: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}
