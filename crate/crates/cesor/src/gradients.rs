//! Risk-neutral and CVaR policy-gradient estimators and the Adam update.
//!
//! Both estimators are gradient-ascent directions. The CVaR estimator is
//!
//! ```text
//! g = 1 / (alpha_eff * (N_o + N_s)) * sum_i w_i 1{R_i <= q_hat} (R_i - q_hat) score_i
//! ```
//!
//! so a batch whose tail returns all equal `q_hat` contributes nothing: ties
//! are zeroed by the `(R_i - q_hat)` factor and everything above `q_hat` by
//! the indicator. Terms with a zero coefficient are skipped outright, which
//! keeps the tail-barrier case bit-exactly zero.

use serde::{Deserialize, Serialize};

use crate::core::{effective_sample_size, ReturnBatch};
use crate::policy::PolicyParams;
use crate::{Error, Result};

/// A policy-gradient estimate plus the sample-usage accounting behind it.
#[derive(Clone, Debug)]
pub struct GradientReport {
    pub gradient: PolicyParams,
    /// Episodes with a strictly negative contribution factor (returns
    /// strictly below the baseline); ties contribute nothing and are not
    /// counted.
    pub used_count: usize,
    /// Fraction of total batch weight carried by the used episodes.
    pub used_weight_fraction: f64,
    /// Effective sample size of the used episodes' weights (0 when none).
    pub n_eff_used: f64,
    /// The baseline the estimator was evaluated against.
    pub q_hat: f64,
}

/// Risk-neutral REINFORCE gradient with a batch-mean baseline, computed over
/// the reference episodes only.
pub fn mean_pg_gradient(batch: &ReturnBatch, scores: &[PolicyParams]) -> Result<GradientReport> {
    if scores.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            expected: batch.len(),
            got: scores.len(),
        });
    }
    let n_ref = batch.n_reference();
    if n_ref == 0 {
        return Err(Error::EmptyInput("mean_pg_gradient needs reference episodes"));
    }
    let baseline = batch.reference_returns().iter().sum::<f64>() / n_ref as f64;
    let mut gradient = scores[0].zeros_like();
    for (record, score) in batch.reference().iter().zip(scores) {
        let coeff = record.ret - baseline;
        if coeff != 0.0 {
            gradient.add_scaled(score, coeff / n_ref as f64);
        }
    }
    if !gradient.is_finite() {
        return Err(Error::NonFinite("mean policy gradient"));
    }
    Ok(GradientReport {
        gradient,
        used_count: n_ref,
        used_weight_fraction: 1.0,
        n_eff_used: n_ref as f64,
        q_hat: baseline,
    })
}

/// CVaR policy gradient at baseline `q_hat` and risk level `alpha_eff`.
///
/// `q_hat` comes from the caller (the training loop estimates it from
/// reference returns at the scheduled level); weights must already be
/// clipped.
pub fn cvar_pg_gradient(
    batch: &ReturnBatch,
    scores: &[PolicyParams],
    q_hat: f64,
    alpha_eff: f64,
) -> Result<GradientReport> {
    if !(alpha_eff > 0.0 && alpha_eff <= 1.0) {
        return Err(Error::invalid(format!(
            "alpha_eff must be in (0, 1], got {alpha_eff}"
        )));
    }
    if scores.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            expected: batch.len(),
            got: scores.len(),
        });
    }
    let n = batch.len() as f64;
    let mut gradient = scores[0].zeros_like();
    let mut used_count = 0usize;
    let mut used_weights = Vec::new();
    let mut total_weight = 0.0;
    for (record, score) in batch.records().iter().zip(scores) {
        total_weight += record.weight;
        if record.ret <= q_hat {
            let coeff = record.weight * (record.ret - q_hat);
            if coeff != 0.0 {
                gradient.add_scaled(score, coeff / (alpha_eff * n));
            }
            if record.ret < q_hat {
                used_count += 1;
                used_weights.push(record.weight);
            }
        }
    }
    if !gradient.is_finite() {
        return Err(Error::NonFinite("cvar policy gradient"));
    }
    let used_weight: f64 = used_weights.iter().sum();
    Ok(GradientReport {
        gradient,
        used_count,
        used_weight_fraction: if total_weight > 0.0 {
            used_weight / total_weight
        } else {
            0.0
        },
        n_eff_used: if used_weights.is_empty() {
            0.0
        } else {
            effective_sample_size(&used_weights)?
        },
        q_hat,
    })
}

/// Adam optimizer state; moments share the parameter layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: usize,
    pub first_moment: PolicyParams,
    pub second_moment: PolicyParams,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(params: &PolicyParams, learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam step, ascending along the gradient.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut PolicyParams,
    gradient: &PolicyParams,
) -> Result<()> {
    if !gradient.is_finite() {
        return Err(Error::NonFinite("adam gradient"));
    }
    if !params.same_shape(gradient) {
        return Err(Error::invalid("gradient shape does not match parameters"));
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let bias1 = 1.0 - b1.powf(t);
    let bias2 = 1.0 - b2.powf(t);
    let m_iter = state.first_moment.param_iter_mut();
    let v_iter = state.second_moment.param_iter_mut();
    let p_iter = params.param_iter_mut();
    for (((m, v), p), g) in m_iter.zip(v_iter).zip(p_iter).zip(gradient.param_iter()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p += state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
