//! The loss system: plain BCE, the distillation loss, the adaptive
//! per-sample weight, the adaptively reweighted BCE and their combination.
//! Every loss returns both a scalar value and its analytic gradient with
//! respect to the student logits; teacher logits are always treated as
//! constants.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    binary_cross_entropy, cross_entropy, kl_divergence, sigmoid, tempered_softmax, LogitVector,
    ProbVector,
};

/// Stable diagnostics keys consumed by training-history logging.
pub mod diag {
    pub const BCE: &str = "bce";
    pub const KD_CE: &str = "kd_ce";
    pub const KD_KL: &str = "kd_kl";
    pub const APT_WEIGHT: &str = "apt_weight";
    pub const TOTAL: &str = "total";
}

/// Hyperparameters of the distillation/reweighting objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdarConfig {
    /// Softmax temperature applied to both teacher and student logits.
    pub tau: f64,
    /// Mixture weight between the hard label and the teacher distribution.
    pub alpha: f64,
    /// Weight of the distillation term in the total loss.
    pub beta: f64,
    /// Clamp applied to any probability entering a logarithm.
    pub epsilon: f64,
    /// Scale the KL term by tau^2 (gradient-magnitude compensation).
    /// Disable to get the literal uncompensated distillation loss.
    pub kd_tau_squared: bool,
    /// Evaluate the hard-label cross-entropy term of the distillation loss
    /// at temperature 1 instead of `tau`.
    pub ce_at_unit_tau: bool,
    /// Override the adaptive weight with a fixed value. Diagnostic switch;
    /// `Some(1.0)` turns the adaptively weighted BCE into plain BCE.
    pub force_apt_weight: Option<f64>,
}

impl Default for KdarConfig {
    fn default() -> Self {
        Self {
            tau: 2.5,
            alpha: 0.5,
            beta: 3.0,
            epsilon: 1e-7,
            kd_tau_squared: true,
            ce_at_unit_tau: false,
            force_apt_weight: None,
        }
    }
}

impl KdarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.beta < 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 || self.epsilon >= 1e-3 {
            return Err(Error::Config(format!(
                "epsilon must be in (0, 1e-3), got {}",
                self.epsilon
            )));
        }
        if let Some(w) = self.force_apt_weight {
            if w.is_nan() || w <= 0.0 || w > 1.0 {
                return Err(Error::Config(format!(
                    "forced adaptive weight must be in (0, 1], got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Scalar loss value, its gradient with respect to the student logits, and
/// named per-term diagnostics.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad_student_logits: Vec<f64>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl LossOutput {
    fn check_finite(self) -> Result<Self> {
        if !self.value.is_finite() {
            return Err(Error::Numerical(format!("loss value is not finite: {}", self.value)));
        }
        if let Some(g) = self.grad_student_logits.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("loss gradient entry is not finite: {g}")));
        }
        Ok(self)
    }
}

/// y' = (1 - alpha) * hard + alpha * teacher.
pub fn smoothed_target(hard: &ProbVector, teacher: &ProbVector, alpha: f64) -> Result<ProbVector> {
    if hard.len() != teacher.len() {
        return Err(Error::Domain(format!(
            "smoothed_target length mismatch: {} vs {}",
            hard.len(),
            teacher.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("smoothing factor must be in [0, 1], got {alpha}")));
    }
    let mixed: Vec<f64> = hard
        .as_slice()
        .iter()
        .zip(teacher.as_slice())
        .map(|(&h, &t)| (1.0 - alpha) * h + alpha * t)
        .collect();
    ProbVector::new(mixed)
}

/// Per-sample adaptive weight 1 - exp(-log(p_t) / log(p_s)).
///
/// Both probabilities are clamped into [epsilon, 1-epsilon] before the
/// logarithms, and the result is clamped into the same interval so it stays
/// strictly inside (0, 1) even where exp() underflows.
pub fn adaptive_weight(p_teacher_gt: f64, p_student_gt: f64, epsilon: f64) -> f64 {
    let pt = p_teacher_gt.clamp(epsilon, 1.0 - epsilon);
    let ps = p_student_gt.clamp(epsilon, 1.0 - epsilon);
    let ratio = pt.ln() / ps.ln();
    (1.0 - (-ratio).exp()).clamp(epsilon, 1.0 - epsilon)
}

/// Mean binary cross-entropy of sigmoid(student_logits) against per-class
/// targets, with its gradient.
pub fn bce_loss(student_logits: &LogitVector, targets: &[f64], cfg: &KdarConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let probs: Vec<f64> = student_logits.as_slice().iter().map(|&z| sigmoid(z)).collect();
    let value = binary_cross_entropy(targets, &probs, cfg.epsilon)?;
    let k = targets.len() as f64;
    // Where the clamp is active the loss is locally constant in that logit.
    let grad: Vec<f64> = probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            if p < cfg.epsilon || p > 1.0 - cfg.epsilon {
                0.0
            } else {
                (p - y) / k
            }
        })
        .collect();
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert(diag::BCE.to_string(), value);
    LossOutput { value, grad_student_logits: grad, diagnostics }.check_finite()
}

/// Gradient of -sum_i t_i log(max(p_i, eps)) with respect to the logits that
/// produced p = softmax(z / tau). Accounts for coordinates where the clamp
/// is active (their log term is constant).
fn clamped_ce_grad(target: &[f64], p: &[f64], tau: f64, eps: f64) -> Vec<f64> {
    let mut active_mass = 0.0;
    for (&ti, &pi) in target.iter().zip(p) {
        if pi >= eps {
            active_mass += ti;
        }
    }
    p.iter()
        .zip(target)
        .map(|(&pi, &ti)| {
            let direct = if pi >= eps { ti } else { 0.0 };
            (active_mass * pi - direct) / tau
        })
        .collect()
}

/// Distillation loss: (1-alpha) * H(hard, p_s) + alpha * s * KL(p_t || p_s),
/// where p are tempered softmax outputs and s is tau^2 unless disabled.
///
/// The gradient with respect to the student logits is
/// (1-alpha)/tau_ce * (p_s_ce - hard) + alpha * s / tau * (p_s - p_t).
pub fn kd_loss(
    student_logits: &LogitVector,
    teacher_logits: &LogitVector,
    hard: &ProbVector,
    cfg: &KdarConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let k = student_logits.len();
    if teacher_logits.len() != k || hard.len() != k {
        return Err(Error::Domain(format!(
            "kd_loss length mismatch: student {k}, teacher {}, hard {}",
            teacher_logits.len(),
            hard.len()
        )));
    }
    let ce_tau = if cfg.ce_at_unit_tau { 1.0 } else { cfg.tau };
    let p_student_ce = tempered_softmax(student_logits, ce_tau)?;
    let p_student = tempered_softmax(student_logits, cfg.tau)?;
    let p_teacher = tempered_softmax(teacher_logits, cfg.tau)?;

    let ce = cross_entropy(hard, &p_student_ce, cfg.epsilon)?;
    let kl = kl_divergence(&p_teacher, &p_student, cfg.epsilon)?;
    let kl_scale = if cfg.kd_tau_squared { cfg.tau * cfg.tau } else { 1.0 };

    let ce_term = (1.0 - cfg.alpha) * ce;
    let kl_term = cfg.alpha * kl_scale * kl;
    let value = ce_term + kl_term;

    let g_ce = clamped_ce_grad(hard.as_slice(), p_student_ce.as_slice(), ce_tau, cfg.epsilon);
    // KL(p_t || p_s) differs from H(p_t, p_s) by a constant in the student.
    let g_kl = clamped_ce_grad(p_teacher.as_slice(), p_student.as_slice(), cfg.tau, cfg.epsilon);
    let grad: Vec<f64> = g_ce
        .iter()
        .zip(&g_kl)
        .map(|(&ce_g, &kl_g)| (1.0 - cfg.alpha) * ce_g + cfg.alpha * kl_scale * kl_g)
        .collect();

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert(diag::KD_CE.to_string(), ce_term);
    diagnostics.insert(diag::KD_KL.to_string(), kl_term);
    LossOutput { value, grad_student_logits: grad, diagnostics }.check_finite()
}

/// Adaptively reweighted BCE: weight(p_t[gt], p_s[gt]) * L_bce.
///
/// The weight is a stop-gradient constant: no gradient flows through it into
/// the logits.
pub fn apt_loss(
    student_logits: &LogitVector,
    teacher_logits: &LogitVector,
    targets: &[f64],
    gt_index: usize,
    cfg: &KdarConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let k = student_logits.len();
    if teacher_logits.len() != k || targets.len() != k {
        return Err(Error::Domain(format!(
            "apt_loss length mismatch: student {k}, teacher {}, targets {}",
            teacher_logits.len(),
            targets.len()
        )));
    }
    if gt_index >= k {
        return Err(Error::Domain(format!(
            "ground-truth index {gt_index} out of range for {k} classes"
        )));
    }
    let weight = match cfg.force_apt_weight {
        Some(w) => w,
        None => {
            let p_student = tempered_softmax(student_logits, cfg.tau)?;
            let p_teacher = tempered_softmax(teacher_logits, cfg.tau)?;
            adaptive_weight(p_teacher[gt_index], p_student[gt_index], cfg.epsilon)
        }
    };
    let bce = bce_loss(student_logits, targets, cfg)?;
    let value = weight * bce.value;
    let grad: Vec<f64> = bce.grad_student_logits.iter().map(|g| weight * g).collect();
    let mut diagnostics = bce.diagnostics;
    diagnostics.insert(diag::APT_WEIGHT.to_string(), weight);
    LossOutput { value, grad_student_logits: grad, diagnostics }.check_finite()
}

/// Total objective: L_apt + beta * L_kd.
pub fn total_loss(
    student_logits: &LogitVector,
    teacher_logits: &LogitVector,
    targets: &[f64],
    hard: &ProbVector,
    gt_index: usize,
    cfg: &KdarConfig,
) -> Result<LossOutput> {
    let apt = apt_loss(student_logits, teacher_logits, targets, gt_index, cfg)?;
    let kd = kd_loss(student_logits, teacher_logits, hard, cfg)?;
    let value = apt.value + cfg.beta * kd.value;
    let grad: Vec<f64> = apt
        .grad_student_logits
        .iter()
        .zip(&kd.grad_student_logits)
        .map(|(&a, &k)| a + cfg.beta * k)
        .collect();
    let mut diagnostics = apt.diagnostics;
    diagnostics.extend(kd.diagnostics);
    diagnostics.insert(diag::TOTAL.to_string(), value);
    LossOutput { value, grad_student_logits: grad, diagnostics }.check_finite()
}
