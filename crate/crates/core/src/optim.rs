//! AdamW with optional AdaFactor-style update clipping (StableAdamW), gradient clipping
//! and a fixed loss scaler that skips non-finite gradients per tensor.
//!
//! One step for a tensor with gradient `g` at iteration `t ≥ 1`:
//!
//! ```text
//! β̂ = β · (1 − β^(t−1)) / (1 − β^t)            (for β₁ and β₂)
//! v ← β̂₁ v + (1 − β̂₁) g
//! u ← β̂₂ u + (1 − β̂₂) g²
//! RMS = sqrt(mean(g² / max(u, ε²)))
//! η = α_t / max(1, RMS)                          (update clipping; η = α_t otherwise)
//! θ ← θ (1 − η λ) − η v / (√u + ε)
//! ```
//!
//! Moments are stored in f32; every scalar and per-element update is computed in f64 and
//! rounded once on store.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Learning rate as a function of the 1-based iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear warmup from 0 to `peak` over `warmup` iterations, then cosine decay to
    /// `final_lr` at iteration `total`.
    WarmupCosine {
        peak: f64,
        warmup: u64,
        total: u64,
        final_lr: f64,
    },
}

impl LrSchedule {
    pub fn at(&self, t: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::WarmupCosine {
                peak,
                warmup,
                total,
                final_lr,
            } => {
                if t <= warmup {
                    peak * t as f64 / warmup.max(1) as f64
                } else if t >= total {
                    final_lr
                } else {
                    let progress = (t - warmup) as f64 / (total - warmup).max(1) as f64;
                    final_lr + 0.5 * (peak - final_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Beta2 {
    /// Fixed decay, debiased with the β̂ correction.
    Constant(f64),
    /// `β₂(t) = 1 − t^(−λ)`, used directly as the (already unbiased) decay.
    Warmup { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Clipping {
    None,
    /// Divide the learning rate by `max(1, RMS_t)` per tensor.
    UpdateClip,
    /// Rescale all gradients to global L2 norm at most `max_norm` before the step.
    GradClip { max_norm: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyperparams {
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: Beta2,
    pub eps: f64,
    pub weight_decay: f64,
    pub clipping: Clipping,
}

impl Default for OptimizerHyperparams {
    fn default() -> Self {
        Self {
            lr: LrSchedule::Constant(1e-3),
            beta1: 0.9,
            beta2: Beta2::Constant(0.99),
            eps: 1e-6,
            weight_decay: 0.0,
            clipping: Clipping::UpdateClip,
        }
    }
}

impl OptimizerHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::InvalidArgument(format!("beta1 must be in [0, 1), got {}", self.beta1)));
        }
        match self.beta2 {
            Beta2::Constant(b) if !(0.0..1.0).contains(&b) => {
                return Err(Error::InvalidArgument(format!("beta2 must be in [0, 1), got {b}")));
            }
            Beta2::Warmup { lambda } if !(lambda > 0.0) => {
                return Err(Error::InvalidArgument(format!("beta2 warmup lambda must be > 0, got {lambda}")));
            }
            _ => {}
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("eps must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("weight_decay must be >= 0".into()));
        }
        if let Clipping::GradClip { max_norm } = self.clipping {
            if !(max_norm > 0.0) {
                return Err(Error::InvalidArgument("max_norm must be > 0".into()));
            }
        }
        Ok(())
    }

    fn beta2_hat(&self, t: u64) -> f64 {
        match self.beta2 {
            Beta2::Constant(b) => debiased_beta(b, t),
            Beta2::Warmup { lambda } => beta2_warmup(t, lambda),
        }
    }
}

/// `β (1 − β^(t−1)) / (1 − β^t)`; zero at `t = 1`.
pub fn debiased_beta(beta: f64, t: u64) -> f64 {
    if beta == 0.0 {
        return 0.0;
    }
    let t = t as i32;
    beta * (1.0 - beta.powi(t - 1)) / (1.0 - beta.powi(t))
}

/// `1 − t^(−λ)`, kept strictly below 1.
pub fn beta2_warmup(t: u64, lambda: f64) -> f64 {
    let b = 1.0 - (t.max(1) as f64).powf(-lambda);
    b.min(1.0 - f64::EPSILON)
}

/// `sqrt(mean(g² / max(u, eps²)))` over one tensor.
pub fn compute_rms(g: &Matrix, u: &Matrix, eps: f64) -> Result<f64> {
    if g.shape() != u.shape() {
        return Err(Error::ShapeMismatch {
            op: "compute_rms",
            lhs: g.shape(),
            rhs: u.shape(),
        });
    }
    if g.is_empty() {
        return Ok(0.0);
    }
    let floor = eps * eps;
    let sum: f64 = g
        .data()
        .iter()
        .zip(u.data())
        .map(|(&g, &u)| {
            let g = g as f64;
            g * g / (u as f64).max(floor)
        })
        .sum();
    Ok((sum / g.len() as f64).sqrt())
}

/// Learning rate after update clipping: `α / max(1, rms)`.
pub fn clipped_lr(alpha: f64, rms: f64) -> f64 {
    alpha / rms.max(1.0)
}

/// Scales every gradient by `max_norm / norm` when the concatenated L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn grad_clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Matrix::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = (*x as f64 * scale) as f32;
            }
        }
    }
    norm
}

/// First and second moment accumulators for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorOptState {
    pub v: Matrix,
    pub u: Matrix,
}

impl TensorOptState {
    pub fn zeros_like(param: &Matrix) -> Self {
        Self {
            v: Matrix::zeros(param.rows(), param.cols()),
            u: Matrix::zeros(param.rows(), param.cols()),
        }
    }
}

/// What one tensor's update did.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TensorStepReport {
    pub rms: f64,
    /// Effective learning rate applied to this tensor.
    pub eta: f64,
}

/// Applies one update to a single tensor. `alpha` is the scheduled learning rate for `t`.
pub fn step_tensor(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut TensorOptState,
    hp: &OptimizerHyperparams,
    alpha: f64,
    t: u64,
) -> Result<TensorStepReport> {
    if t == 0 {
        return Err(Error::InvalidArgument("iteration t must start at 1".into()));
    }
    for (other, op) in [(grad, "grad"), (&state.v, "first moment"), (&state.u, "second moment")] {
        if other.shape() != param.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: param.shape(),
                rhs: other.shape(),
            });
        }
    }
    let b1 = debiased_beta(hp.beta1, t);
    let b2 = hp.beta2_hat(t);

    for ((v, u), &g) in state.v.data_mut().iter_mut().zip(state.u.data_mut().iter_mut()).zip(grad.data()) {
        let g = g as f64;
        *v = (b1 * *v as f64 + (1.0 - b1) * g) as f32;
        *u = (b2 * *u as f64 + (1.0 - b2) * g * g) as f32;
    }

    let rms = compute_rms(grad, &state.u, hp.eps)?;
    let eta = match hp.clipping {
        Clipping::UpdateClip => clipped_lr(alpha, rms),
        Clipping::None | Clipping::GradClip { .. } => alpha,
    };
    let decay = 1.0 - eta * hp.weight_decay;
    for ((p, &v), &u) in param.data_mut().iter_mut().zip(state.v.data()).zip(state.u.data()) {
        let update = v as f64 / ((u as f64).sqrt() + hp.eps);
        *p = (*p as f64 * decay - eta * update) as f32;
    }
    Ok(TensorStepReport { rms, eta })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub t: u64,
    pub alpha: f64,
    /// Global gradient norm before clipping, when gradient clipping is enabled.
    pub grad_norm: Option<f64>,
    /// `None` for tensors whose update was skipped.
    pub tensors: Vec<Option<TensorStepReport>>,
}

/// AdamW / StableAdamW over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct StableAdamW {
    hp: OptimizerHyperparams,
    states: Vec<TensorOptState>,
    t: u64,
}

impl StableAdamW {
    pub fn new(hp: OptimizerHyperparams, params: &[Matrix]) -> Result<Self> {
        hp.validate()?;
        Ok(Self {
            hp,
            states: params.iter().map(TensorOptState::zeros_like).collect(),
            t: 0,
        })
    }

    pub fn hyperparams(&self) -> &OptimizerHyperparams {
        &self.hp
    }

    pub fn states(&self) -> &[TensorOptState] {
        &self.states
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> u64 {
        self.t
    }

    /// Advances to the next iteration and updates every tensor whose gradient is present.
    /// Skipped tensors keep their parameters and moments untouched.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Option<Matrix>]) -> Result<StepReport> {
        if params.len() != self.states.len() || grads.len() != self.states.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} tensors, got {} params and {} grads",
                self.states.len(),
                params.len(),
                grads.len()
            )));
        }
        let t = self.t + 1;
        let alpha = self.hp.lr.at(t);

        let mut clipped: Option<Vec<Option<Matrix>>> = None;
        let mut grad_norm = None;
        if let Clipping::GradClip { max_norm } = self.hp.clipping {
            let present: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].is_some()).collect();
            let mut dense: Vec<Matrix> = present.iter().map(|&i| grads[i].clone().unwrap()).collect();
            grad_norm = Some(grad_clip_global_norm(&mut dense, max_norm));
            let mut out = vec![None; grads.len()];
            for (i, g) in present.into_iter().zip(dense) {
                out[i] = Some(g);
            }
            clipped = Some(out);
        }
        let grads = clipped.as_deref().unwrap_or(grads);

        let mut tensors = Vec::with_capacity(params.len());
        for ((param, grad), state) in params.iter_mut().zip(grads).zip(self.states.iter_mut()) {
            let report = match grad {
                Some(g) => Some(step_tensor(param, g, state, &self.hp, alpha, t)?),
                None => None,
            };
            tensors.push(report);
        }
        self.t = t;
        Ok(StepReport {
            t,
            alpha,
            grad_norm,
            tensors,
        })
    }
}

/// Constant loss multiplier with per-tensor Inf/NaN skipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScaler {
    scale: f32,
    per_tensor_skip: bool,
}

/// Gradients after unscaling; skipped tensors are `None` and listed by index.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredGrads {
    pub grads: Vec<Option<Matrix>>,
    pub skipped: Vec<usize>,
}

impl LossScaler {
    pub fn new(scale: f32) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument(format!("loss scale must be positive and finite, got {scale}")));
        }
        Ok(Self {
            scale,
            per_tensor_skip: true,
        })
    }

    /// Skip every tensor when any tensor is non-finite, as a global dynamic scaler would.
    pub fn with_global_skip(mut self) -> Self {
        self.per_tensor_skip = false;
        self
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn per_tensor_skip(&self) -> bool {
        self.per_tensor_skip
    }

    pub fn scale_loss(&self, loss: f32) -> f32 {
        loss * self.scale
    }

    pub fn filter_nonfinite(&self, grads: Vec<Matrix>) -> FilteredGrads {
        let mut out = Vec::with_capacity(grads.len());
        let mut skipped = Vec::new();
        for (i, mut g) in grads.into_iter().enumerate() {
            for x in g.data_mut() {
                *x /= self.scale;
            }
            if g.is_finite() {
                out.push(Some(g));
            } else {
                skipped.push(i);
                out.push(None);
            }
        }
        if !self.per_tensor_skip && !skipped.is_empty() {
            skipped = (0..out.len()).collect();
            out.iter_mut().for_each(|g| *g = None);
        }
        FilteredGrads { grads: out, skipped }
    }
}

/// Unscales gradients produced from a scaled loss and drops non-finite tensors.
pub fn filter_nonfinite(grads: Vec<Matrix>, scaler: &LossScaler) -> FilteredGrads {
    scaler.filter_nonfinite(grads)
}
