//! Distillation objective over student logits.
//!
//! All tensors may carry a batch axis; every reduction (MSE mean, Dice sums,
//! BCE class balance, area ratio) runs over the whole batch. Terms are
//! evaluated in `f64`.
//!
//! ```text
//! p       = sigmoid(tau * pred)          q = sigmoid(tau * teacher)
//! teacher = mean((p - q)^2) + dice(p, q)
//! gt      = balanced_bce(p, y) + dice(p, y)
//! area    = max(0, rho - sum(p) / sum(y))    (0 when sum(y) = 0)
//! total   = a * teacher + (1 - a) * gt + area_weight * area
//! ```

mod cache;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use cache::{read_cache, synth_cache, write_cache, TeacherRecord, PTC1_MAGIC, TEACHER_SIZE};
pub use train::{fit_head, AdamW, FitConfig, FitOutcome, TrainSample};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape([usize; 4], [usize; 4]),
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("ground truth must be binary, found {0}")]
    NonBinary(f32),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: {breakdown:?}")]
    NonFinite {
        step: usize,
        breakdown: LossBreakdown,
    },
    #[error("confidence list is empty")]
    NoConfidence,
    #[error(transparent)]
    Net(#[from] crate::net::NetError),
    #[error(transparent)]
    Format(#[from] crate::binio::FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    /// Minimum predicted-to-target area ratio.
    pub area_ratio: f64,
    pub area_weight: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 5.0,
            area_ratio: 0.4,
            area_weight: 0.4,
            dice_eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(LossError::Config(format!(
                "temperature {}",
                self.temperature
            )));
        }
        if !(self.area_ratio > 0.0 && self.area_ratio <= 1.0) {
            return Err(LossError::Config(format!("area ratio {}", self.area_ratio)));
        }
        if self.dice_eps.is_nan() || self.dice_eps <= 0.0 {
            return Err(LossError::Config(format!("dice eps {}", self.dice_eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_teacher: f64,
    pub l_gt: f64,
    pub l_area: f64,
    pub l_total: f64,
    pub alpha: f64,
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LossError::Shape(a.shape(), b.shape()));
    }
    Ok(())
}

fn check_binary(y: &Tensor) -> Result<()> {
    match y.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        Some(&v) => Err(LossError::NonBinary(v)),
        None => Ok(()),
    }
}

#[inline]
fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn probs(x: &Tensor, tau: f64) -> Vec<f64> {
    x.data()
        .iter()
        .map(|&v| sigmoid64(tau * v as f64))
        .collect()
}

/// Temperature-scaled logistic, `sigmoid(tau * x)`.
pub fn sigmoid_tau(x: &Tensor, tau: f64) -> Tensor {
    x.map(|v| sigmoid64(tau * v as f64) as f32)
}

fn dice_parts(p: &[f64], q: &[f64], eps: f64) -> (f64, f64) {
    let (mut inter, mut total) = (0.0, 0.0);
    for (&a, &b) in p.iter().zip(q) {
        inter += a * b;
        total += a + b;
    }
    (2.0 * inter + eps, total + eps)
}

fn dice_values(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let (num, den) = dice_parts(p, q, eps);
    1.0 - num / den
}

/// `1 - (2 sum(pq) + eps) / (sum(p) + sum(q) + eps)`
pub fn dice_loss(p: &Tensor, q: &Tensor, eps: f64) -> Result<f64> {
    same_shape(p, q)?;
    let p: Vec<f64> = p.data().iter().map(|&v| v as f64).collect();
    let q: Vec<f64> = q.data().iter().map(|&v| v as f64).collect();
    Ok(dice_values(&p, &q, eps))
}

fn teacher_terms(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let mse = p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
    mse + dice_values(p, q, eps)
}

pub fn teacher_loss(pred: &Tensor, teacher: &Tensor, cfg: &LossConfig) -> Result<f64> {
    same_shape(pred, teacher)?;
    cfg.validate()?;
    let p = probs(pred, cfg.temperature);
    let q = probs(teacher, cfg.temperature);
    Ok(teacher_terms(&p, &q, cfg.dice_eps))
}

/// Per-pixel BCE weights: positives `N / (2 N_pos)`, negatives
/// `N / (2 N_neg)` (inverse class frequency, mean 1). Single-class targets
/// fall back to unit weights.
pub fn balance_weights(gt: &[f64]) -> (f64, f64) {
    let n = gt.len() as f64;
    let pos = gt.iter().filter(|&&v| v > 0.5).count() as f64;
    let neg = n - pos;
    if pos == 0.0 || neg == 0.0 {
        (1.0, 1.0)
    } else {
        (n / (2.0 * pos), n / (2.0 * neg))
    }
}

fn gt_terms(pred: &Tensor, p: &[f64], y: &[f64], cfg: &LossConfig) -> f64 {
    let (wp, wn) = balance_weights(y);
    let tau = cfg.temperature;
    let bce = pred
        .data()
        .iter()
        .zip(y)
        .map(|(&x, &t)| {
            let z = tau * x as f64;
            if t > 0.5 {
                wp * softplus(-z)
            } else {
                wn * softplus(z)
            }
        })
        .sum::<f64>()
        / y.len() as f64;
    bce + dice_values(p, y, cfg.dice_eps)
}

pub fn gt_loss(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<f64> {
    same_shape(pred, gt)?;
    check_binary(gt)?;
    cfg.validate()?;
    let p = probs(pred, cfg.temperature);
    let y: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    Ok(gt_terms(pred, &p, &y, cfg))
}

fn area_terms(p: &[f64], y: &[f64], rho: f64) -> (f64, f64) {
    let target: f64 = y.iter().sum();
    if target == 0.0 {
        return (0.0, target);
    }
    let ratio = p.iter().sum::<f64>() / target;
    ((rho - ratio).max(0.0), target)
}

pub fn area_loss(pred: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<f64> {
    same_shape(pred, gt)?;
    cfg.validate()?;
    let p = probs(pred, cfg.temperature);
    let y: Vec<f64> = gt.data().iter().map(|&v| v as f64).collect();
    Ok(area_terms(&p, &y, cfg.area_ratio).0)
}

/// Batch blend factor: mean confidence clamped to `[0, 1]`.
pub fn blend_alpha(confidence: &[f32]) -> Result<f64> {
    if confidence.is_empty() {
        return Err(LossError::NoConfidence);
    }
    let mean = confidence.iter().map(|&c| c as f64).sum::<f64>() / confidence.len() as f64;
    Ok(if mean.is_nan() {
        0.0
    } else {
        mean.clamp(0.0, 1.0)
    })
}

struct Prepared {
    p: Vec<f64>,
    q: Vec<f64>,
    y: Vec<f64>,
    alpha: f64,
}

fn prepare(
    pred: &Tensor,
    teacher: &Tensor,
    gt: &Tensor,
    confidence: &[f32],
    cfg: &LossConfig,
) -> Result<Prepared> {
    same_shape(pred, teacher)?;
    same_shape(pred, gt)?;
    check_binary(gt)?;
    cfg.validate()?;
    Ok(Prepared {
        p: probs(pred, cfg.temperature),
        q: probs(teacher, cfg.temperature),
        y: gt.data().iter().map(|&v| v as f64).collect(),
        alpha: blend_alpha(confidence)?,
    })
}

pub fn total_loss(
    pred: &Tensor,
    teacher: &Tensor,
    gt: &Tensor,
    confidence: &[f32],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    let Prepared { p, q, y, alpha } = prepare(pred, teacher, gt, confidence, cfg)?;
    let l_teacher = teacher_terms(&p, &q, cfg.dice_eps);
    let l_gt = gt_terms(pred, &p, &y, cfg);
    let l_area = area_terms(&p, &y, cfg.area_ratio).0;
    Ok(LossBreakdown {
        l_teacher,
        l_gt,
        l_area,
        l_total: alpha * l_teacher + (1.0 - alpha) * l_gt + cfg.area_weight * l_area,
        alpha,
    })
}

/// `d(1 - A/B)/dp_i` with `A = 2 sum(pq) + eps`, `B = sum(p) + sum(q) + eps`.
fn dice_grad(p: &[f64], q: &[f64], eps: f64) -> Vec<f64> {
    let (a, b) = dice_parts(p, q, eps);
    let b2 = b * b;
    q.iter().map(|&qi| -(2.0 * qi * b - a) / b2).collect()
}

/// Analytic gradient of [`total_loss`] with respect to the student logits.
pub fn loss_grad(
    pred: &Tensor,
    teacher: &Tensor,
    gt: &Tensor,
    confidence: &[f32],
    cfg: &LossConfig,
) -> Result<Tensor> {
    let Prepared { p, q, y, alpha } = prepare(pred, teacher, gt, confidence, cfg)?;
    let n = p.len() as f64;
    let tau = cfg.temperature;
    let eps = cfg.dice_eps;

    let dice_t = dice_grad(&p, &q, eps);
    let dice_y = dice_grad(&p, &y, eps);
    let (wp, wn) = balance_weights(&y);
    let (area, target) = area_terms(&p, &y, cfg.area_ratio);
    let area_dp = if area > 0.0 { -1.0 / target } else { 0.0 };

    let grad = (0..p.len())
        .map(|i| {
            let dp = tau * p[i] * (1.0 - p[i]);
            let teacher_dp = 2.0 * (p[i] - q[i]) / n + dice_t[i];
            let w = if y[i] > 0.5 { wp } else { wn };
            let bce_dz = w * tau * (p[i] - y[i]) / n;
            let g = alpha * teacher_dp * dp
                + (1.0 - alpha) * (bce_dz + dice_y[i] * dp)
                + cfg.area_weight * area_dp * dp;
            g as f32
        })
        .collect();
    Ok(Tensor::new(pred.shape(), grad).expect("gradient matches prediction shape"))
}
