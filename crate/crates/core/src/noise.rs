//! Variance growth of quantized inner products.
//!
//! With `û = u + ε`, `v̂ = v + ξ`, all entries i.i.d. and mean zero, and `Var(ε) = Var(ξ) = σ_q²`:
//!
//! ```text
//! Var(⟨û, v̂⟩) = Var(⟨u, v⟩) + k · σ_q² · (σ_u² + σ_v² + σ_q²)
//! ```
//!
//! This module evaluates the closed form, estimates the same quantity by Monte Carlo, and
//! measures the output-error variance of the real int8 quantizer for comparison.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linear::int8_matmul_dequant;
use crate::numerics::{Matrix, Rng, Seed};
use crate::quantize::{quantize_rowwise, quantize_tensorwise, INT8_MAX};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantNoiseModel {
    pub k: usize,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub sigma_q: f64,
}

impl QuantNoiseModel {
    pub fn new(k: usize, sigma_u: f64, sigma_v: f64, sigma_q: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if [sigma_u, sigma_v, sigma_q].iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument("standard deviations must be finite and >= 0".into()));
        }
        Ok(Self {
            k,
            sigma_u,
            sigma_v,
            sigma_q,
        })
    }

    /// Variance increase per unit of inner dimension.
    pub fn per_element_increase(&self) -> f64 {
        let q2 = self.sigma_q * self.sigma_q;
        q2 * (self.sigma_u * self.sigma_u + self.sigma_v * self.sigma_v + q2)
    }
}

/// `k · σ_q² · (σ_u² + σ_v² + σ_q²)`.
pub fn predicted_variance_increase(model: &QuantNoiseModel) -> f64 {
    model.k as f64 * model.per_element_increase()
}

/// Monte Carlo estimate of `Var(⟨û, v̂⟩) − Var(⟨u, v⟩)`.
///
/// Each trial draws `u, v ~ N(0, σ²)` and Gaussian noise `ε, ξ ~ N(0, σ_q²)` and evaluates
/// the noisy product twice, with `(ε, ξ)` and with the antithetic `(−ε, −ξ)`. The noise
/// marginals are unchanged, but the `⟨u,v⟩ · noise` cross terms cancel within each pair,
/// which keeps the difference of two large sample variances from being swamped by their
/// covariance. Both variances use the unbiased estimator; the clean product is weighted to
/// match the two noisy samples per trial. Trial `i` draws from `seed.derive(i)`.
pub fn monte_carlo_variance_increase(model: &QuantNoiseModel, trials: usize, seed: Seed) -> Result<f64> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let k = model.k;
    let mut clean = Welford::default();
    let mut noisy = Welford::default();
    let mut u = vec![0.0f64; k];
    let mut v = vec![0.0f64; k];
    for trial in 0..trials {
        let mut rng = Rng::new(seed.derive(trial as u64));
        for x in u.iter_mut() {
            *x = rng.normal() * model.sigma_u;
        }
        for x in v.iter_mut() {
            *x = rng.normal() * model.sigma_v;
        }
        let mut dot = 0.0;
        let mut linear = 0.0;
        let mut cross = 0.0;
        for i in 0..k {
            let eps = rng.normal() * model.sigma_q;
            let xi = rng.normal() * model.sigma_q;
            dot += u[i] * v[i];
            linear += eps * v[i] + xi * u[i];
            cross += eps * xi;
        }
        clean.push(dot);
        clean.push(dot);
        noisy.push(dot + linear + cross);
        noisy.push(dot - linear + cross);
    }
    Ok(noisy.variance() - clean.variance())
}

/// Ratio of the weight-gradient inner dimension (tokens per batch) to the forward inner
/// dimension: the variance multiplier under equal per-element quantization noise.
pub fn relative_wgrad_noise_factor(batch_tokens: usize, fwd_inner: usize) -> Result<f64> {
    if batch_tokens == 0 || fwd_inner == 0 {
        return Err(Error::InvalidArgument("dimensions must be at least 1".into()));
    }
    Ok(batch_tokens as f64 / fwd_inner as f64)
}

/// One line of a noise report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseRow {
    pub k: usize,
    pub predicted: f64,
    pub empirical: f64,
    pub rel_error: f64,
}

impl NoiseRow {
    pub fn new(k: usize, predicted: f64, empirical: f64) -> Self {
        let rel_error = if predicted == 0.0 {
            empirical.abs()
        } else {
            (empirical - predicted).abs() / predicted.abs()
        };
        Self {
            k,
            predicted,
            empirical,
            rel_error,
        }
    }
}

/// Closed form vs Monte Carlo for each `k`.
pub fn monte_carlo_report(ks: &[usize], sigma_u: f64, sigma_v: f64, sigma_q: f64, trials: usize, seed: Seed) -> Result<Vec<NoiseRow>> {
    ks.iter()
        .map(|&k| {
            let model = QuantNoiseModel::new(k, sigma_u, sigma_v, sigma_q)?;
            let empirical = monte_carlo_variance_increase(&model, trials, seed.derive(k as u64))?;
            Ok(NoiseRow::new(k, predicted_variance_increase(&model), empirical))
        })
        .collect()
}

/// Setup for measuring the real int8 quantizer against the closed form.
///
/// Operands are `N(0, σ²)` truncated to `±clip·σ`, and every row of `X` and the tensor `W`
/// carry one entry pinned at `±clip·σ`. The absmax, hence the quantization step
/// `clip·σ/127`, is then the same for every `k`, which is what the linear-in-`k` law assumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerBridge {
    pub rows: usize,
    pub cols: usize,
    pub sigma: f64,
    pub clip: f64,
}

impl Default for QuantizerBridge {
    fn default() -> Self {
        Self {
            rows: 256,
            cols: 256,
            sigma: 1.0,
            clip: 4.0,
        }
    }
}

/// Measured output-error variance for one inner dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BridgeSample {
    pub k: usize,
    /// `step/√12` of the row-wise X grid, averaged over rows.
    pub sigma_q_x: f64,
    /// `step/√12` of the tensor-wise W grid.
    pub sigma_q_w: f64,
    /// Sample stdev of the X and W entries.
    pub sigma_x: f64,
    pub sigma_w: f64,
    /// Unbiased variance of `int8_matmul_dequant(Q(X), Q(W)) − X·Wᵀ` over all outputs.
    pub empirical: f64,
}

impl BridgeSample {
    /// Closed form evaluated with the measured stdevs; `σ_q` is the pooled
    /// `√((σ_qx² + σ_qw²)/2)`, equal to the shared step when both grids coincide.
    pub fn model(&self) -> QuantNoiseModel {
        let sigma_q = ((self.sigma_q_x.powi(2) + self.sigma_q_w.powi(2)) / 2.0).sqrt();
        QuantNoiseModel {
            k: self.k,
            sigma_u: self.sigma_x,
            sigma_v: self.sigma_w,
            sigma_q,
        }
    }

    pub fn predicted(&self) -> f64 {
        predicted_variance_increase(&self.model())
    }
}

impl QuantizerBridge {
    fn operand(&self, rng: &mut Rng, rows: usize, k: usize, pin_every_row: bool) -> Matrix {
        let bound = self.clip * self.sigma;
        let mut m = Matrix::from_fn(rows, k, |_, _| loop {
            let z = rng.normal() * self.sigma;
            if z.abs() < bound {
                break z as f32;
            }
        });
        let pinned_rows = if pin_every_row { rows } else { 1 };
        for i in 0..pinned_rows {
            let j = rng.below(k as u64) as usize;
            let sign = if rng.below(2) == 0 { 1.0 } else { -1.0 };
            m.set(i, j, (sign * bound) as f32);
        }
        m
    }

    pub fn sample(&self, k: usize, seed: Seed) -> Result<BridgeSample> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        let mut rng = Rng::new(seed);
        let x = self.operand(&mut rng, self.rows, k, true);
        let w = self.operand(&mut rng, self.cols, k, false);
        let qx = quantize_rowwise(&x)?;
        let qw = quantize_tensorwise(&w)?;
        let y = int8_matmul_dequant(&qx, &qw)?;

        let mut err = Welford::default();
        for i in 0..self.rows {
            let xr = x.row(i);
            for j in 0..self.cols {
                let exact: f64 = xr.iter().zip(w.row(j)).map(|(&a, &b)| a as f64 * b as f64).sum();
                err.push(y.get(i, j) as f64 - exact);
            }
        }
        let twelve = 12f64.sqrt();
        let sigma_q_x = qx.state().iter().map(|&s| s as f64 / INT8_MAX as f64 / twelve).sum::<f64>() / self.rows as f64;
        let sigma_q_w = qw.state()[0] as f64 / INT8_MAX as f64 / twelve;
        Ok(BridgeSample {
            k,
            sigma_q_x,
            sigma_q_w,
            sigma_x: sample_stdev(x.data()),
            sigma_w: sample_stdev(w.data()),
            empirical: err.variance(),
        })
    }
}

/// Least-squares slope through the origin of `y` against `x`.
pub fn slope_through_origin(points: &[(f64, f64)]) -> f64 {
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    sxy / sxx
}

/// Ordinary least-squares slope of `y` against `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn sample_stdev(data: &[f32]) -> f64 {
    let mut w = Welford::default();
    for &x in data {
        w.push(x as f64);
    }
    w.variance().sqrt()
}

/// Streaming mean/variance.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub(crate) fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Unbiased sample variance; 0 for fewer than two samples.
    pub(crate) fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}
