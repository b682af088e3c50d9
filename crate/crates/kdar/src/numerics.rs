//! Pure real-valued kernels shared by every other module: tempered softmax,
//! divergences, entropies, binary cross-entropy and a central finite-difference
//! gradient oracle.
//!
//! All kernels run in f64. Any probability entering a logarithm is clamped
//! (floor `eps` for softmax-style distributions, `[eps, 1-eps]` for sigmoid
//! scores), which keeps every loss finite without special-casing p -> 0 or
//! p -> 1 at the call sites.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamping floor applied to probabilities before logarithms when no
/// configured value is available.
pub const DEFAULT_EPSILON: f64 = 1e-7;

/// Default step for [`finite_diff_gradient`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// A probability distribution over the answer vocabulary: entries in [0, 1]
/// summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Domain("probability vector must be non-empty".into()));
        }
        let mut sum = 0.0;
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!(
                    "probability entry {i} = {v} outside [0, 1]"
                )));
            }
            sum += v;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "probability entries sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(Self(values))
    }

    /// Constructor for values that are normalized by construction
    /// (e.g. softmax output).
    pub(crate) fn new_unchecked(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        debug_assert!((values.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        Self(values)
    }

    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::Domain(format!(
                "one-hot index {index} out of range for length {len}"
            )));
        }
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::Domain("uniform distribution needs len >= 1".into()));
        }
        Ok(Self(vec![1.0 / len as f64; len]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A vector of finite pre-softmax scores, one per answer class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("logit entry {i} = {v} is not finite")));
            }
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for LogitVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log sum_i exp(z_i), computed with a max shift so it cannot overflow.
pub fn log_sum_exp(z: &LogitVector) -> Result<f64> {
    log_sum_exp_slice(z.as_slice())
}

pub(crate) fn log_sum_exp_slice(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::Domain("log_sum_exp of an empty vector".into()));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// softmax(z / tau). Output sums to 1 and is invariant under adding a
/// constant to all logits.
pub fn tempered_softmax(z: &LogitVector, tau: f64) -> Result<ProbVector> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if z.is_empty() {
        return Err(Error::Domain("tempered_softmax of an empty vector".into()));
    }
    Ok(ProbVector::new_unchecked(softmax_scaled(z.as_slice(), tau)))
}

/// softmax(z / tau) on a raw slice; caller guarantees non-empty finite input.
pub(crate) fn softmax_scaled(z: &[f64], tau: f64) -> Vec<f64> {
    let max = z.iter().map(|&x| x / tau).fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&x| (x / tau - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// KL(p || q) = sum_i p_i log(p_i / q_i), with q floored at `epsilon` before
/// the logarithm and 0 * log(0 / .) = 0.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector, epsilon: f64) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Domain(format!(
            "kl_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut acc = 0.0;
    for (&pi, &qi) in p.as_slice().iter().zip(q.as_slice()) {
        if pi > 0.0 {
            acc += pi * (pi.ln() - qi.max(epsilon).ln());
        }
    }
    Ok(acc)
}

/// H(p) = -sum_i p_i log p_i, with 0 log 0 = 0.
pub fn entropy(p: &ProbVector) -> f64 {
    p.as_slice()
        .iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| -pi * pi.ln())
        .sum()
}

/// H(t, p) = -sum_i t_i log p_i, with p floored at `epsilon`.
/// Satisfies H(t, p) = entropy(t) + kl_divergence(t, p).
pub fn cross_entropy(target: &ProbVector, pred: &ProbVector, epsilon: f64) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::Domain(format!(
            "cross_entropy length mismatch: {} vs {}",
            target.len(),
            pred.len()
        )));
    }
    let mut acc = 0.0;
    for (&ti, &pi) in target.as_slice().iter().zip(pred.as_slice()) {
        if ti > 0.0 {
            acc -= ti * pi.max(epsilon).ln();
        }
    }
    Ok(acc)
}

/// Mean over classes of -[y log p + (1-y) log(1-p)], with each prediction
/// clamped into [epsilon, 1-epsilon].
pub fn binary_cross_entropy(targets: &[f64], preds: &[f64], epsilon: f64) -> Result<f64> {
    if targets.len() != preds.len() {
        return Err(Error::Domain(format!(
            "binary_cross_entropy length mismatch: {} vs {}",
            targets.len(),
            preds.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Domain("binary_cross_entropy of empty vectors".into()));
    }
    for (i, &y) in targets.iter().enumerate() {
        if !y.is_finite() || !(0.0..=1.0).contains(&y) {
            return Err(Error::Domain(format!("target entry {i} = {y} outside [0, 1]")));
        }
    }
    let mut acc = 0.0;
    for (&y, &p) in targets.iter().zip(preds) {
        let c = p.clamp(epsilon, 1.0 - epsilon);
        acc -= y * c.ln() + (1.0 - y) * (1.0 - c).ln();
    }
    Ok(acc / targets.len() as f64)
}

/// Central finite differences (f(x + h e_i) - f(x - h e_i)) / 2h, one entry
/// per coordinate of `x`. The verification oracle for every analytic
/// gradient in this crate.
pub fn finite_diff_gradient<F>(mut f: F, x: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + step;
        let plus = f(&point);
        point[i] = orig - step;
        let minus = f(&point);
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numerical(format!(
                "finite difference at coordinate {i}: f(x+h) = {plus}, f(x-h) = {minus}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}
