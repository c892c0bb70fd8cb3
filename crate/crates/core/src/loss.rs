//! The three-term training objective.

use serde::{Deserialize, Serialize};

use crate::bmnet::MaskBatch;
use crate::error::{Result, SgadError};

/// Weights on the backbone loss, the drop-ratio regularizer and the SGNet loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub alpha_m: f64,
    pub alpha_g: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            alpha_m: 1.0,
            alpha_g: 0.3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("alpha_m", self.alpha_m), ("alpha_g", self.alpha_g)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SgadError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Cross-entropy of one logit row, and its gradient `softmax - onehot`.
pub fn cross_entropy_sample(logits: &[f32], label: usize) -> Result<(f64, Vec<f32>)> {
    if label >= logits.len() {
        return Err(SgadError::Domain(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = logits.iter().map(|&v| (v as f64 - max).exp()).sum();
    let lse = max + sum.ln();
    let loss = lse - logits[label] as f64;
    let mut grad: Vec<f32> = logits.iter().map(|&v| ((v as f64 - lse).exp()) as f32).collect();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean cross-entropy over the batch.
pub fn classification_loss(logits: &[Vec<f32>], labels: &[usize]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(SgadError::Structural(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (row, &y) in logits.iter().zip(labels) {
        total += cross_entropy_sample(row, y)?.0;
    }
    Ok(total / labels.len() as f64)
}

/// `|rat - (1 - mean(bits))|` for one sample, plus its (sub)gradient w.r.t.
/// each mask bit. The measured ratio averages all positions, forced ones included.
pub fn drop_ratio_term(expected_drop: f64, bits: &[u8]) -> (f64, f64) {
    let l = bits.len() as f64;
    let kept: f64 = bits.iter().map(|&b| b as f64).sum();
    let measured = 1.0 - kept / l;
    let diff = expected_drop - measured;
    let sign = if diff > 0.0 {
        1.0
    } else if diff < 0.0 {
        -1.0
    } else {
        0.0
    };
    // d|r - 1 + sum(m)/L| / dm_j = sign(diff) / L
    (diff.abs(), sign / l)
}

/// `R^m = (1/N) sum_n |rat_s^n - (1 - (1/L) sum_j m_j^n)|`.
pub fn drop_ratio_regularizer(expected_drop: &[f64], mask: &MaskBatch) -> Result<f64> {
    if expected_drop.len() != mask.num_samples || mask.num_samples == 0 {
        return Err(SgadError::Structural(format!(
            "{} drop targets for {} mask rows",
            expected_drop.len(),
            mask.num_samples
        )));
    }
    let total: f64 = expected_drop
        .iter()
        .enumerate()
        .map(|(n, &r)| drop_ratio_term(r, mask.row(n)).0)
        .sum();
    Ok(total / mask.num_samples as f64)
}

/// `alpha * R' + alpha_m * R^m + alpha_g * R^g`.
pub fn total_loss(r_prime: f64, r_m: f64, r_g: f64, cfg: &LossConfig) -> Result<f64> {
    for (name, v) in [("R'", r_prime), ("R^m", r_m), ("R^g", r_g)] {
        if !v.is_finite() {
            return Err(SgadError::Numeric(format!("{name} is not finite ({v})")));
        }
    }
    Ok(cfg.alpha * r_prime + cfg.alpha_m * r_m + cfg.alpha_g * r_g)
}
