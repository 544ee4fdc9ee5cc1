//! Confidence-gated token distillation for replay batches.
//!
//! For every answer position the teacher's temperature-softened distribution
//! `p_T` gives a confidence `c = max_k p_T[k]`. Tokens the teacher is unsure
//! about (`c < tau`) are trained on the ground truth only; above the
//! threshold the distillation share ramps linearly up to `alpha_max`.

use crate::autodiff::{cross_entropy_weights, softmax_rows, Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    pub tau: f64,
    pub alpha_max: f64,
    pub replay_weight: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            tau: 0.5,
            alpha_max: 0.7,
            replay_weight: 1.0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return bad(format!("tau must lie in [0, 1), got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.alpha_max) {
            return bad(format!("alpha_max must lie in [0, 1], got {}", self.alpha_max));
        }
        if !(self.replay_weight >= 0.0 && self.replay_weight.is_finite()) {
            return bad(format!("replay_weight must be non-negative, got {}", self.replay_weight));
        }
        Ok(())
    }
}

/// Teacher distribution at temperature `t`. The result is a plain tensor, so
/// nothing computed from it can carry gradient back to the teacher.
pub fn teacher_probs(logits: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0) {
        return Err(Error::InvalidParameter(format!("temperature must be positive, got {t}")));
    }
    Ok(softmax_rows(logits, t))
}

pub fn token_confidence(probs: &Tensor) -> Vec<f64> {
    (0..probs.rows())
        .map(|r| probs.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

pub fn distill_weight(c: f64, tau: f64, alpha_max: f64) -> f64 {
    if c < tau {
        0.0
    } else {
        (c - tau) / (1.0 - tau) * alpha_max
    }
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// `T² · KL(p_teacher ‖ p_student)` for one position, given the student's
/// temperature-scaled log-probabilities.
pub fn token_kd(p_teacher: &[f64], log_p_student: &[f64], t: f64) -> f64 {
    let kl: f64 = p_teacher
        .iter()
        .zip(log_p_student)
        .map(|(&p, &lq)| if p > 0.0 { plogp(p) - p * lq } else { 0.0 })
        .sum();
    kl * t * t
}

/// Blended replay loss averaged over the masked-in tokens:
/// `(1 − α) · CE + α · T² · KL(p_T ‖ p_S)` per token.
///
/// `teacher_logits` must have the same shape as the student's logits and is
/// treated as a constant.
pub fn replay_loss(
    g: &mut Graph,
    student_logits: NodeId,
    teacher_logits: &Tensor,
    targets: &[usize],
    mask: &[bool],
    cfg: &DistillConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let student_shape = g.value(student_logits).shape().to_vec();
    if teacher_logits.shape() != student_shape.as_slice() {
        return Err(Error::Shape {
            op: "replay_loss",
            lhs: student_shape,
            rhs: teacher_logits.shape().to_vec(),
        });
    }
    let t = cfg.temperature;
    let p_t = teacher_probs(teacher_logits, t)?;
    let alpha: Vec<f64> = token_confidence(&p_t)
        .into_iter()
        .zip(mask)
        .map(|(c, &m)| if m { distill_weight(c, cfg.tau, cfg.alpha_max) } else { 0.0 })
        .collect();

    let ce_weights = cross_entropy_weights(g, student_logits, targets, mask, |r| 1.0 - alpha[r])?;
    let log_p1 = g.log_softmax_temp(student_logits, 1.0)?;
    let ce = g.weighted_sum(log_p1, ce_weights)?;
    if alpha.iter().all(|&a| a == 0.0) {
        return Ok(ce);
    }

    // Σ_k p_T (ln p_T − ln p_S): the ln p_T part is a constant offset, the
    // ln p_S part a weighted sum over the student's log-probabilities.
    let m = mask.iter().filter(|m| **m).count() as f64;
    let k = p_t.last_dim();
    let mut kd_weights = vec![0.0; p_t.numel()];
    let mut offset = 0.0;
    for (r, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let scale = a * t * t / m;
        let row = p_t.row(r);
        offset += scale * row.iter().map(|&p| plogp(p)).sum::<f64>();
        for (w, &p) in kd_weights[r * k..(r + 1) * k].iter_mut().zip(row) {
            *w = -scale * p;
        }
    }
    let log_pt = g.log_softmax_temp(student_logits, t)?;
    let kd = g.weighted_sum(log_pt, kd_weights)?;
    let offset = g.constant(Tensor::scalar(offset));
    let kd = g.add(kd, offset)?;
    g.add(ce, kd)
}
