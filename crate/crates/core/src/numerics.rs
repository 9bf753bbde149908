//! Scalar and vector kernels used by the gate and the trainer: temperature
//! softmax, KL divergence, AdamW, the warmup + cosine learning-rate schedule
//! and global-norm gradient clipping.
//!
//! Everything here works in `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floor applied to predicted probabilities before taking logs in [`kl_div`].
pub const KL_PROB_FLOOR: f64 = 1e-12;

/// Tolerance on `sum == 1` when validating a [`ProbVector`].
pub const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

type Result<T> = std::result::Result<T, NumericsError>;

fn invalid(msg: impl Into<String>) -> NumericsError {
    NumericsError::InvalidArgument(msg.into())
}

/// A probability distribution over the three processing paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct ProbVector([f64; 3]);

impl ProbVector {
    pub fn new(entries: [f64; 3]) -> Result<Self> {
        if entries.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(invalid(format!("probabilities out of [0, 1]: {entries:?}")));
        }
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(entries))
    }

    pub fn uniform() -> Self {
        Self([1.0 / 3.0; 3])
    }

    pub fn as_array(&self) -> &[f64; 3] {
        &self.0
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// Expected value of `values` under this distribution.
    pub fn dot(&self, values: &[f64; 3]) -> f64 {
        self.0.iter().zip(values).map(|(p, v)| p * v).sum()
    }
}

impl TryFrom<[f64; 3]> for ProbVector {
    type Error = NumericsError;

    fn try_from(value: [f64; 3]) -> Result<Self> {
        Self::new(value)
    }
}

impl From<ProbVector> for [f64; 3] {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// `softmax(logits / temperature)`, stabilised by subtracting the maximum.
pub fn softmax(logits: &[f64; 3], temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(invalid(format!("temperature must be positive, got {temperature}")));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(invalid(format!("non-finite logit in {logits:?}")));
    }
    let scaled = logits.map(|z| z / temperature);
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = scaled.map(|s| (s - max).exp());
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.map(|e| e / total)))
}

/// `KL(target || predicted)` in nats, with `0 ln 0 = 0` and predicted entries
/// floored at [`KL_PROB_FLOOR`].
pub fn kl_div(target: &ProbVector, predicted: &ProbVector) -> Result<f64> {
    let mut total = 0.0;
    for (&p, &q) in target.0.iter().zip(&predicted.0) {
        if p.is_nan() || q.is_nan() {
            return Err(invalid("NaN probability"));
        }
        if p > 0.0 {
            total += p * (p / q.max(KL_PROB_FLOOR)).ln();
        }
    }
    // Rounding can leave a tiny negative value when target == predicted.
    Ok(total.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    /// Fresh AdamW state with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(num_params: usize, weight_decay: f64) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn num_params(&self) -> usize {
        self.first_moment.len()
    }
}

/// One AdamW update with decoupled weight decay:
/// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.num_params() {
        return Err(invalid(format!(
            "length mismatch: params {}, grads {}, optimizer state {}",
            params.len(),
            grads.len(),
            state.num_params()
        )));
    }
    if !(lr >= 0.0) {
        return Err(invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    let OptimizerState {
        first_moment,
        second_moment,
        weight_decay,
        epsilon,
        ..
    } = state;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(first_moment.iter_mut())
        .zip(second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * (m_hat / (v_hat.sqrt() + *epsilon) + *weight_decay * *p);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn new(lr_max: f64, warmup_ratio: f64, total_steps: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&warmup_ratio) {
            return Err(invalid(format!("warmup_ratio must be in [0, 1), got {warmup_ratio}")));
        }
        if total_steps == 0 {
            return Err(invalid("total_steps must be positive"));
        }
        if !(lr_max >= 0.0) {
            return Err(invalid(format!("lr_max must be non-negative, got {lr_max}")));
        }
        Ok(Self {
            lr_max,
            warmup_ratio,
            total_steps,
        })
    }

    /// Step at which warmup ends and the learning rate peaks.
    pub fn warmup_steps(&self) -> u64 {
        // The epsilon keeps products like 0.05 * 60 = 3.0000000000000004 from
        // rounding up a whole step.
        let raw = self.warmup_ratio * self.total_steps as f64 - 1e-9;
        (raw.ceil().max(0.0) as u64).min(self.total_steps - 1)
    }
}

/// Linear warmup from zero to `lr_max`, then cosine annealing down to zero at
/// `total_steps`.
pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(invalid(format!(
            "step {step} outside schedule of {} steps",
            cfg.total_steps
        )));
    }
    let warmup = cfg.warmup_steps();
    if step < warmup {
        return Ok(cfg.lr_max * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (cfg.total_steps - warmup) as f64;
    Ok(cfg.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scales `grads` in place so the global L2 norm is at most `max_norm`.
/// Returns the norm observed before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

pub fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}
