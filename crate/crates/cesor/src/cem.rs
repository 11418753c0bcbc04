//! Parametric context-distribution families with sampling, density ratios,
//! weighted moment-method updates, and the static- and dynamic-target
//! cross-entropy loops built on them.
//!
//! All families keep a support independent of their parameter, so the
//! importance weight `D_phi0(c) / D_phi(c)` is finite on every point the
//! original distribution can produce. Probability-like parameters are
//! clamped to `[EPS_P, 1 - EPS_P]` on update to preserve that.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta as BetaDist, Binomial as BinomialDist, Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::core::{empirical_quantile, floor_snapped};
use crate::logging::log_debug;
use crate::{Error, Result};

/// Floor for probability parameters, keeping every family's support fixed.
pub const EPS_P: f64 = 1e-3;

/// A parametric context distribution `D_phi`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ContextDistribution {
    /// {0, 1} with success probability `p`.
    Bernoulli { p: f64 },
    /// Exponential with mean `mean` (not rate).
    ExponentialMean { mean: f64 },
    /// `Beta(2 * mean, 2 - 2 * mean)`, so the parameter is the mean and
    /// `mean = 0.5` is the uniform distribution on (0, 1).
    BetaMeanParam { mean: f64 },
    /// Count of successes out of `n_trials` with per-trial probability `p`.
    Binomial { n_trials: u64, p: f64 },
    /// Finite distribution over indices `0..k`.
    Categorical { probs: Vec<f64> },
    /// Independent components, concatenated into one context vector.
    Product { components: Vec<ContextDistribution> },
}

use ContextDistribution::*;

impl ContextDistribution {
    pub fn validate(&self) -> Result<()> {
        match self {
            Bernoulli { p } | Binomial { p, .. } => {
                if !(*p > 0.0 && *p < 1.0) {
                    return Err(Error::invalid(format!(
                        "probability must be in (0, 1), got {p}"
                    )));
                }
            }
            ExponentialMean { mean } => {
                if !(*mean > 0.0) {
                    return Err(Error::invalid(format!(
                        "exponential mean must be positive, got {mean}"
                    )));
                }
            }
            BetaMeanParam { mean } => {
                if !(*mean > 0.0 && *mean < 1.0) {
                    return Err(Error::invalid(format!(
                        "beta mean must be in (0, 1), got {mean}"
                    )));
                }
            }
            Categorical { probs } => {
                if probs.len() < 2 {
                    return Err(Error::invalid("categorical needs at least 2 outcomes"));
                }
                let sum: f64 = probs.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || probs.iter().any(|&p| p < EPS_P) {
                    return Err(Error::invalid(format!(
                        "categorical probabilities must be >= {EPS_P} and sum to 1, got {probs:?}"
                    )));
                }
            }
            Product { components } => {
                if components.is_empty() {
                    return Err(Error::invalid("product needs at least one component"));
                }
                for c in components {
                    c.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Dimension of the context vectors this family produces.
    pub fn dim(&self) -> usize {
        match self {
            Product { components } => components.iter().map(|c| c.dim()).sum(),
            _ => 1,
        }
    }

    /// Flat parameter vector, one entry per learnable component.
    pub fn params_flat(&self) -> Vec<f64> {
        match self {
            Bernoulli { p } | Binomial { p, .. } => vec![*p],
            ExponentialMean { mean } | BetaMeanParam { mean } => vec![*mean],
            Categorical { probs } => probs.clone(),
            Product { components } => components.iter().flat_map(|c| c.params_flat()).collect(),
        }
    }

    /// Analytic mean of the context vector under this distribution.
    pub fn mean(&self) -> Vec<f64> {
        match self {
            Bernoulli { p } => vec![*p],
            ExponentialMean { mean } | BetaMeanParam { mean } => vec![*mean],
            Binomial { n_trials, p } => vec![*n_trials as f64 * p],
            Categorical { probs } => {
                vec![probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum()]
            }
            Product { components } => components.iter().flat_map(|c| c.mean()).collect(),
        }
    }

    pub fn same_family(&self, other: &Self) -> bool {
        match (self, other) {
            (Bernoulli { .. }, Bernoulli { .. })
            | (ExponentialMean { .. }, ExponentialMean { .. })
            | (BetaMeanParam { .. }, BetaMeanParam { .. }) => true,
            (Binomial { n_trials: a, .. }, Binomial { n_trials: b, .. }) => a == b,
            (Categorical { probs: a }, Categorical { probs: b }) => a.len() == b.len(),
            (Product { components: a }, Product { components: b }) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_family(y))
            }
            _ => false,
        }
    }

    /// Draw one context vector.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        self.sample_into(rng, &mut out);
        out
    }

    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
        match self {
            Bernoulli { p } => out.push((rng.gen::<f64>() < *p) as u8 as f64),
            ExponentialMean { mean } => {
                out.push(Exp::new(1.0 / mean).expect("validated").sample(rng))
            }
            BetaMeanParam { mean } => {
                let dist = BetaDist::new(2.0 * mean, 2.0 - 2.0 * mean).expect("validated");
                out.push(dist.sample(rng));
            }
            Binomial { n_trials, p } => out.push(
                BinomialDist::new(*n_trials, *p)
                    .expect("validated")
                    .sample(rng) as f64,
            ),
            Categorical { probs } => {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut idx = probs.len() - 1;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        idx = i;
                        break;
                    }
                }
                out.push(idx as f64);
            }
            Product { components } => {
                for c in components {
                    c.sample_into(rng, out);
                }
            }
        }
    }

    /// Log density (or log mass) of a context vector.
    pub fn log_density(&self, c: &[f64]) -> Result<f64> {
        if c.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: c.len(),
            });
        }
        let mut offset = 0;
        self.log_density_at(c, &mut offset)
    }

    fn log_density_at(&self, c: &[f64], offset: &mut usize) -> Result<f64> {
        match self {
            Bernoulli { p } => {
                let value = c[*offset];
                *offset += 1;
                if value == 1.0 {
                    Ok(p.ln())
                } else if value == 0.0 {
                    Ok((1.0 - p).ln())
                } else {
                    Err(Error::invalid(format!(
                        "bernoulli context must be 0 or 1, got {value}"
                    )))
                }
            }
            ExponentialMean { mean } => {
                let value = c[*offset];
                *offset += 1;
                if value < 0.0 {
                    return Err(Error::invalid(format!(
                        "exponential context must be non-negative, got {value}"
                    )));
                }
                Ok(-mean.ln() - value / mean)
            }
            BetaMeanParam { mean } => {
                let value = c[*offset];
                *offset += 1;
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::invalid(format!(
                        "beta context must be in [0, 1], got {value}"
                    )));
                }
                let a = 2.0 * mean;
                let b = 2.0 - 2.0 * mean;
                // The open-interval support is shared by every admissible
                // parameter; nudge boundary values inward to keep the
                // density finite there.
                let x = value.clamp(1e-12, 1.0 - 1e-12);
                Ok((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b))
            }
            Binomial { n_trials, p } => {
                let k = c[*offset];
                *offset += 1;
                if k < 0.0 || k > *n_trials as f64 || k.fract() != 0.0 {
                    return Err(Error::invalid(format!(
                        "binomial context must be an integer count in [0, {n_trials}], got {k}"
                    )));
                }
                let n = *n_trials as f64;
                Ok(ln_choose(n, k) + k * p.ln() + (n - k) * (1.0 - p).ln())
            }
            Categorical { probs } => {
                let value = c[*offset];
                *offset += 1;
                let idx = value as usize;
                if value.fract() != 0.0 || idx >= probs.len() {
                    return Err(Error::invalid(format!(
                        "categorical context must be an index below {}, got {value}",
                        probs.len()
                    )));
                }
                Ok(probs[idx].ln())
            }
            Product { components } => {
                let mut acc = 0.0;
                for comp in components {
                    acc += comp.log_density_at(c, offset)?;
                }
                Ok(acc)
            }
        }
    }
}

/// Lanczos log-gamma for positive arguments.
fn ln_gamma(z: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if z < 0.5 {
        // Gamma(z) = Gamma(z + 1) / z
        return ln_gamma(z + 1.0) - z.ln();
    }
    let z = z - 1.0;
    let mut x = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn ln_choose(n: f64, k: f64) -> f64 {
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0)
}

/// Draw `n` i.i.d. context vectors.
pub fn sample_contexts(
    dist: &ContextDistribution,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    dist.validate()?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}

/// Unclipped density ratio `D_phi0(c) / D_phi(c)`.
pub fn density_ratio(
    phi0: &ContextDistribution,
    phi: &ContextDistribution,
    c: &[f64],
) -> Result<f64> {
    if !phi0.same_family(phi) {
        return Err(Error::invalid("density ratio requires matching families"));
    }
    let num = phi0.log_density(c)?;
    let den = phi.log_density(c)?;
    if den == f64::NEG_INFINITY {
        return Err(Error::invalid(
            "zero sample density: fixed-support constraint violated",
        ));
    }
    Ok((num - den).exp())
}

/// Clipped importance weight `D_phi0(c) / D_phi(c)`.
pub fn importance_weight(
    phi0: &ContextDistribution,
    phi: &ContextDistribution,
    c: &[f64],
    clip: (f64, f64),
) -> Result<f64> {
    Ok(density_ratio(phi0, phi, c)?.clamp(clip.0, clip.1))
}

/// CE selection threshold `max(q_alpha(reference returns), q_beta(all
/// returns))`: the sample beta-quantile smooths the update until the
/// reference alpha-tail is reached, after which the reference quantile acts
/// as a stopping condition.
pub fn ce_threshold(
    ref_returns: &[f64],
    all_returns: &[f64],
    alpha: f64,
    beta_smooth: f64,
) -> Result<f64> {
    let q_ref = empirical_quantile(ref_returns, alpha)?;
    let q_all = empirical_quantile(all_returns, beta_smooth)?;
    Ok(q_ref.max(q_all))
}

/// Outcome of a CE update step.
#[derive(Clone, Debug)]
pub struct CeUpdateOutcome {
    pub phi: ContextDistribution,
    /// No returns fell at or below the threshold; phi was left unchanged.
    pub empty_selection: bool,
    /// Some parameter hit its admissible boundary and was clamped.
    pub clamped: bool,
}

/// Closed-form weighted moment update of `phi` on the contexts whose return
/// is at or below `q`.
pub fn ce_update(
    phi: &ContextDistribution,
    contexts: &[Vec<f64>],
    weights: &[f64],
    returns: &[f64],
    q: f64,
) -> Result<CeUpdateOutcome> {
    if contexts.len() != weights.len() || weights.len() != returns.len() {
        return Err(Error::DimensionMismatch {
            expected: contexts.len(),
            got: weights.len().min(returns.len()),
        });
    }
    let selected: Vec<usize> = (0..returns.len()).filter(|&i| returns[i] <= q).collect();
    if selected.is_empty() {
        log_debug!("ce_update: empty selection at q={q}, phi unchanged");
        return Ok(CeUpdateOutcome {
            phi: phi.clone(),
            empty_selection: true,
            clamped: false,
        });
    }
    let mut clamped = false;
    let mut offset = 0;
    let phi_new = update_family(phi, contexts, weights, &selected, &mut offset, &mut clamped)?;
    Ok(CeUpdateOutcome {
        phi: phi_new,
        empty_selection: false,
        clamped,
    })
}

fn weighted_mean(contexts: &[Vec<f64>], weights: &[f64], selected: &[usize], offset: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in selected {
        num += weights[i] * contexts[i][offset];
        den += weights[i];
    }
    num / den
}

fn clamp_prob(p: f64, clamped: &mut bool) -> f64 {
    if p < EPS_P || p > 1.0 - EPS_P {
        *clamped = true;
    }
    p.clamp(EPS_P, 1.0 - EPS_P)
}

fn update_family(
    phi: &ContextDistribution,
    contexts: &[Vec<f64>],
    weights: &[f64],
    selected: &[usize],
    offset: &mut usize,
    clamped: &mut bool,
) -> Result<ContextDistribution> {
    match phi {
        Bernoulli { .. } => {
            let m = weighted_mean(contexts, weights, selected, *offset);
            *offset += 1;
            Ok(Bernoulli {
                p: clamp_prob(m, clamped),
            })
        }
        ExponentialMean { .. } => {
            let m = weighted_mean(contexts, weights, selected, *offset);
            *offset += 1;
            if m < 1e-9 {
                *clamped = true;
            }
            Ok(ExponentialMean { mean: m.max(1e-9) })
        }
        BetaMeanParam { .. } => {
            let m = weighted_mean(contexts, weights, selected, *offset);
            *offset += 1;
            Ok(BetaMeanParam {
                mean: clamp_prob(m, clamped),
            })
        }
        Binomial { n_trials, .. } => {
            let m = weighted_mean(contexts, weights, selected, *offset);
            *offset += 1;
            Ok(Binomial {
                n_trials: *n_trials,
                p: clamp_prob(m / *n_trials as f64, clamped),
            })
        }
        Categorical { probs } => {
            let mut freq = vec![0.0; probs.len()];
            let mut total = 0.0;
            for &i in selected {
                freq[contexts[i][*offset] as usize] += weights[i];
                total += weights[i];
            }
            *offset += 1;
            let mut floored: Vec<f64> = freq
                .iter()
                .map(|f| {
                    let p = f / total;
                    if p < EPS_P {
                        *clamped = true;
                    }
                    p.max(EPS_P)
                })
                .collect();
            let sum: f64 = floored.iter().sum();
            for p in &mut floored {
                *p /= sum;
            }
            Ok(Categorical { probs: floored })
        }
        Product { components } => {
            let updated = components
                .iter()
                .map(|comp| update_family(comp, contexts, weights, selected, offset, clamped))
                .collect::<Result<Vec<_>>>()?;
            Ok(Product {
                components: updated,
            })
        }
    }
}

/// Mutable CE sampler state carried across training iterations.
#[derive(Clone, Debug)]
pub struct CeState {
    pub phi: ContextDistribution,
    pub phi0: ContextDistribution,
    pub beta_smooth: f64,
    pub weight_clip: (f64, f64),
    /// Flat parameter snapshot after each update.
    pub history: Vec<Vec<f64>>,
}

impl CeState {
    pub fn new(
        phi0: ContextDistribution,
        beta_smooth: f64,
        weight_clip: (f64, f64),
    ) -> Result<Self> {
        phi0.validate()?;
        if !(beta_smooth > 0.0 && beta_smooth < 1.0) {
            return Err(Error::invalid(format!(
                "beta_smooth must be in (0, 1), got {beta_smooth}"
            )));
        }
        if !(weight_clip.0 > 0.0 && weight_clip.0 <= 1.0 && weight_clip.1 >= 1.0) {
            return Err(Error::invalid(format!(
                "weight clip must satisfy 0 < low <= 1 <= high, got {weight_clip:?}"
            )));
        }
        Ok(Self {
            phi: phi0.clone(),
            phi0,
            beta_smooth,
            weight_clip,
            history: Vec::new(),
        })
    }

    /// Apply one CE update and record the new parameters.
    pub fn update(
        &mut self,
        contexts: &[Vec<f64>],
        weights: &[f64],
        returns: &[f64],
        q: f64,
    ) -> Result<CeUpdateOutcome> {
        let outcome = ce_update(&self.phi, contexts, weights, returns, q)?;
        self.phi = outcome.phi.clone();
        self.history.push(self.phi.params_flat());
        Ok(outcome)
    }
}

/// Per-iteration record of a CE run.
#[derive(Clone, Debug)]
pub struct CemIterStats {
    pub iteration: usize,
    /// Flat parameters after this iteration's update.
    pub phi: Vec<f64>,
    /// Analytic mean of `D_phi` after the update.
    pub phi_mean: Vec<f64>,
    /// Mean score of the samples drawn from `D_phi` this iteration.
    pub sample_mean: f64,
    /// Selection threshold used this iteration.
    pub q: f64,
    pub selected: usize,
    pub empty_selection: bool,
}

fn stats_row(
    iteration: usize,
    phi: &ContextDistribution,
    sample_mean: f64,
    q: f64,
    selected: usize,
    empty_selection: bool,
) -> CemIterStats {
    CemIterStats {
        iteration,
        phi: phi.params_flat(),
        phi_mean: phi.mean(),
        sample_mean,
        q,
        selected,
        empty_selection,
    }
}

/// Static-target cross-entropy loop: shift `phi` toward scores at or below a
/// constant numeric target.
///
/// Per iteration: sample from `D_phi`, weight by the (optionally clipped)
/// density ratio against `phi0`, select scores at or below
/// `max(q_target, q_beta(scores))`, and apply the moment update. The row for
/// iteration 0 reports the starting parameters.
#[allow(clippy::too_many_arguments)]
pub fn static_cem_run<F>(
    phi0: &ContextDistribution,
    score_fn: F,
    q_target: f64,
    n_per_iter: usize,
    beta_smooth: f64,
    max_iters: usize,
    weight_clip: Option<(f64, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CemIterStats>>
where
    F: Fn(&[f64]) -> f64,
{
    phi0.validate()?;
    if n_per_iter == 0 {
        return Err(Error::EmptyInput("static_cem_run batch size"));
    }
    let mut phi = phi0.clone();
    let mut rows = vec![stats_row(0, &phi, f64::NAN, f64::NAN, 0, false)];
    for iter in 1..=max_iters {
        let contexts = sample_contexts(&phi, n_per_iter, rng)?;
        let weights = contexts
            .iter()
            .map(|c| {
                let r = density_ratio(phi0, &phi, c)?;
                Ok(match weight_clip {
                    Some((lo, hi)) => r.clamp(lo, hi),
                    None => r,
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        let scores: Vec<f64> = contexts.iter().map(|c| score_fn(c)).collect();
        let q = q_target.max(empirical_quantile(&scores, beta_smooth)?);
        let outcome = ce_update(&phi, &contexts, &weights, &scores, q)?;
        phi = outcome.phi;
        let sample_mean = scores.iter().sum::<f64>() / scores.len() as f64;
        rows.push(stats_row(
            iter,
            &phi,
            sample_mean,
            q,
            scores.iter().filter(|&&s| s <= q).count(),
            outcome.empty_selection,
        ));
    }
    Ok(rows)
}

/// Dynamic-target cross-entropy loop with reference mixing: a `nu` fraction
/// of each batch comes from `phi0` and anchors the quantile target
/// `q_alpha(reference scores)`, while the rest comes from the current `phi`.
///
/// This is the sampler used during training, exercised here against a fixed
/// score function.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_cem_run<F>(
    phi0: &ContextDistribution,
    score_fn: F,
    alpha: f64,
    nu: f64,
    beta_smooth: f64,
    n_per_iter: usize,
    iters: usize,
    weight_clip: Option<(f64, f64)>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CemIterStats>>
where
    F: Fn(&[f64]) -> f64,
{
    phi0.validate()?;
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::invalid(format!("nu must be in (0, 1], got {nu}")));
    }
    let n_ref = floor_snapped(nu * n_per_iter as f64).max(1);
    let n_shift = n_per_iter - n_ref;
    let mut phi = phi0.clone();
    let mut rows = vec![stats_row(0, &phi, f64::NAN, f64::NAN, 0, false)];
    for iter in 1..=iters {
        let ref_contexts = sample_contexts(phi0, n_ref, rng)?;
        let shift_contexts = sample_contexts(&phi, n_shift, rng)?;
        let mut weights = vec![1.0; n_ref];
        for c in &shift_contexts {
            let r = density_ratio(phi0, &phi, c)?;
            weights.push(match weight_clip {
                Some((lo, hi)) => r.clamp(lo, hi),
                None => r,
            });
        }
        let mut contexts = ref_contexts;
        contexts.extend(shift_contexts);
        let scores: Vec<f64> = contexts.iter().map(|c| score_fn(c)).collect();
        let q = ce_threshold(&scores[..n_ref], &scores, alpha, beta_smooth)?;
        let outcome = ce_update(&phi, &contexts, &weights, &scores, q)?;
        phi = outcome.phi;
        let shifted_scores = &scores[n_ref..];
        let sample_mean = if shifted_scores.is_empty() {
            f64::NAN
        } else {
            shifted_scores.iter().sum::<f64>() / shifted_scores.len() as f64
        };
        rows.push(stats_row(
            iter,
            &phi,
            sample_mean,
            q,
            scores.iter().filter(|&&s| s <= q).count(),
            outcome.empty_selection,
        ));
    }
    Ok(rows)
}

/// Beta toy: contexts from `Beta(2 phi, 2 - 2 phi)` scored by their own
/// value, targeting the bottom `alpha` of the uniform reference.
pub fn beta_toy_run(
    alpha: f64,
    nu: f64,
    beta_smooth: f64,
    n_per_iter: usize,
    iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<CemIterStats>> {
    let phi0 = BetaMeanParam { mean: 0.5 };
    dynamic_cem_run(
        &phi0,
        |c| c[0],
        alpha,
        nu,
        beta_smooth,
        n_per_iter,
        iters,
        None,
        rng,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::rng::{substream, STREAM_DEMO};
    use proptest::prelude::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        substream(seed, &[STREAM_DEMO])
    }

    #[test]
    fn ln_gamma_reference_values() {
        // Gamma(0.5) = sqrt(pi), Gamma(1) = Gamma(2) = 1, Gamma(5) = 24.
        assert!((ln_gamma(0.5) - 0.5 * std::f64::consts::PI.ln()).abs() < 1e-12);
        assert!(ln_gamma(1.0).abs() < 1e-12);
        assert!(ln_gamma(2.0).abs() < 1e-12);
        assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-11);
        assert!((ln_beta(0.5, 1.5) - (std::f64::consts::PI / 2.0).ln()).abs() < 1e-11);
    }

    #[test]
    fn degenerate_bernoulli_rejected_but_near_degenerate_sampling_works() {
        assert!(Bernoulli { p: 1.0 }.validate().is_err());
        let dist = Bernoulli { p: 1.0 - EPS_P };
        let mut r = rng(1);
        let draws = sample_contexts(&dist, 2000, &mut r).unwrap();
        let ones = draws.iter().filter(|c| c[0] == 1.0).count();
        assert!(ones >= 1990);
    }

    #[test]
    fn product_sampling_moment_check() {
        let dist = Product {
            components: vec![Bernoulli { p: 0.2 }, ExponentialMean { mean: 32.0 }],
        };
        let mut r = rng(2);
        let n = 100_000;
        let draws = sample_contexts(&dist, n, &mut r).unwrap();
        let mean1 = draws.iter().map(|c| c[0]).sum::<f64>() / n as f64;
        let mean2 = draws.iter().map(|c| c[1]).sum::<f64>() / n as f64;
        // Three standard errors.
        let se1 = (0.2f64 * 0.8 / n as f64).sqrt();
        let se2 = 32.0 / (n as f64).sqrt();
        assert!((mean1 - 0.2).abs() < 3.0 * se1, "bernoulli mean {mean1}");
        assert!((mean2 - 32.0).abs() < 3.0 * se2, "exponential mean {mean2}");
    }

    #[test]
    fn beta_half_is_uniform_by_ks_test() {
        let dist = BetaMeanParam { mean: 0.5 };
        let mut r = rng(3);
        let n = 100_000;
        let mut draws: Vec<f64> = sample_contexts(&dist, n, &mut r)
            .unwrap()
            .into_iter()
            .map(|c| c[0])
            .collect();
        draws.sort_by(f64::total_cmp);
        let mut d_stat = 0.0f64;
        for (i, &x) in draws.iter().enumerate() {
            let hi = (i + 1) as f64 / n as f64 - x;
            let lo = x - i as f64 / n as f64;
            d_stat = d_stat.max(hi.max(lo));
        }
        // 1% critical value for the one-sample KS statistic.
        let critical = 1.628 / (n as f64).sqrt();
        assert!(d_stat < critical, "KS statistic {d_stat} vs {critical}");
    }

    #[test]
    fn importance_weight_examples() {
        let phi0 = Bernoulli { p: 0.2 };
        assert_eq!(
            importance_weight(&phi0, &phi0.clone(), &[1.0], (0.2, 5.0)).unwrap(),
            1.0
        );
        let phi = Bernoulli { p: 0.5 };
        let w = importance_weight(&phi0, &phi, &[1.0], (0.2, 5.0)).unwrap();
        assert!((w - 0.4).abs() < 1e-12);
        // Unclipped ratio far above the cap clips to the cap.
        let wide0 = ExponentialMean { mean: 1.0 };
        let wide = ExponentialMean { mean: 100.0 };
        let raw = density_ratio(&wide0, &wide, &[0.001]).unwrap();
        assert!(raw > 5.0);
        assert_eq!(
            importance_weight(&wide0, &wide, &[0.001], (0.2, 5.0)).unwrap(),
            5.0
        );
    }

    #[test]
    fn mismatched_families_rejected() {
        let a = Bernoulli { p: 0.2 };
        let b = ExponentialMean { mean: 1.0 };
        assert!(density_ratio(&a, &b, &[1.0]).is_err());
    }

    #[test]
    fn ce_threshold_examples() {
        let reference: Vec<f64> = (0..100).map(f64::from).collect();
        let all: Vec<f64> = (-100..100).map(f64::from).collect();
        let q = ce_threshold(&reference, &all, 0.05, 0.2).unwrap();
        assert_eq!(q, 4.0); // max(4, -61)

        let constant = vec![7.0; 50];
        assert_eq!(ce_threshold(&constant, &constant, 0.05, 0.2).unwrap(), 7.0);

        // Reference alpha-quantile dominating acts as the stopping condition.
        let low_all: Vec<f64> = (-300..-100).map(f64::from).collect();
        let q = ce_threshold(&reference, &low_all, 0.05, 0.2).unwrap();
        assert_eq!(q, 4.0);
    }

    #[test]
    fn ce_update_examples() {
        // Bernoulli weighted mean 3/4.
        let phi = Bernoulli { p: 0.5 };
        let contexts = vec![vec![1.0], vec![0.0], vec![1.0]];
        let weights = vec![1.0, 1.0, 2.0];
        let returns = vec![-1.0, -1.0, -1.0];
        let out = ce_update(&phi, &contexts, &weights, &returns, 0.0).unwrap();
        assert_eq!(out.phi, Bernoulli { p: 0.75 });
        assert!(!out.empty_selection);

        // Point mass on a single context clamps into the admissible range.
        let contexts = vec![vec![1.0]];
        let out = ce_update(&phi, &contexts, &[5.0], &[-1.0], 0.0).unwrap();
        assert_eq!(out.phi, Bernoulli { p: 1.0 - EPS_P });
        assert!(out.clamped);

        // Exponential mean of selected values.
        let phi = ExponentialMean { mean: 5.0 };
        let contexts = vec![vec![10.0], vec![50.0], vec![999.0]];
        let out = ce_update(&phi, &contexts, &[1.0, 1.0, 1.0], &[-1.0, -1.0, 7.0], 0.0).unwrap();
        assert_eq!(out.phi, ExponentialMean { mean: 30.0 });

        // Empty selection leaves phi unchanged and raises the flag.
        let out = ce_update(&phi, &contexts, &[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0], 0.0).unwrap();
        assert!(out.empty_selection);
        assert_eq!(out.phi, phi);
    }

    #[test]
    fn ce_update_categorical_floors_and_renormalizes() {
        let phi = Categorical {
            probs: vec![0.25, 0.25, 0.5],
        };
        // Only outcome 2 selected: others floor at EPS_P.
        let contexts = vec![vec![2.0], vec![2.0]];
        let out = ce_update(&phi, &contexts, &[1.0, 1.0], &[-1.0, -1.0], 0.0).unwrap();
        if let Categorical { probs } = out.phi {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(probs[0] > 0.0 && probs[1] > 0.0);
            assert!(probs[2] > 0.99);
        } else {
            panic!("family changed");
        }
        assert!(out.clamped);
    }

    #[test]
    fn ce_update_product_updates_components_independently() {
        let phi = Product {
            components: vec![Bernoulli { p: 0.2 }, ExponentialMean { mean: 32.0 }],
        };
        let contexts = vec![vec![1.0, 10.0], vec![0.0, 20.0]];
        let out = ce_update(&phi, &contexts, &[1.0, 1.0], &[-1.0, -1.0], 0.0).unwrap();
        assert_eq!(
            out.phi,
            Product {
                components: vec![Bernoulli { p: 0.5 }, ExponentialMean { mean: 15.0 }],
            }
        );
    }

    #[test]
    fn full_selection_uniform_weights_is_sample_mle() {
        // With all samples selected and unit weights the update reduces to
        // plain moment matching on the sample.
        let phi = Bernoulli { p: 0.3 };
        let mut r = rng(4);
        let contexts = sample_contexts(&phi, 5000, &mut r).unwrap();
        let weights = vec![1.0; contexts.len()];
        let returns = vec![0.0; contexts.len()];
        let out = ce_update(&phi, &contexts, &weights, &returns, 1.0).unwrap();
        let sample_mean = contexts.iter().map(|c| c[0]).sum::<f64>() / contexts.len() as f64;
        if let Bernoulli { p } = out.phi {
            assert!((p - sample_mean).abs() < 1e-12);
        } else {
            panic!("family changed");
        }
    }

    #[test]
    fn static_run_with_unreachable_target_tracks_sample_quantile() {
        // A target below every achievable score never becomes the threshold,
        // so q' is always the sample beta-quantile and phi keeps drifting
        // toward the low-score region.
        let phi0 = ExponentialMean { mean: 10.0 };
        let mut r = rng(5);
        let rows = static_cem_run(&phi0, |c| c[0], -1.0, 2000, 0.3, 5, None, &mut r).unwrap();
        for row in &rows[1..] {
            assert!(row.q > -1.0);
        }
        let means: Vec<f64> = rows.iter().map(|r| r.phi_mean[0]).collect();
        assert!(means.last().unwrap() < &2.0, "phi means {means:?}");
    }

    #[test]
    fn static_run_select_all_keeps_phi_near_start() {
        let phi0 = Bernoulli { p: 0.4 };
        let mut r = rng(6);
        let rows =
            static_cem_run(&phi0, |c| c[0], f64::INFINITY, 4000, 0.5, 6, None, &mut r).unwrap();
        for row in &rows[1..] {
            assert!(
                (row.phi[0] - 0.4).abs() < 0.05,
                "phi drifted to {}",
                row.phi[0]
            );
        }
    }

    #[test]
    fn static_run_beta_toy_reaches_tail_mean() {
        // Constant numeric target at the uniform 10% point.
        let phi0 = BetaMeanParam { mean: 0.5 };
        let mut r = rng(8);
        let rows = static_cem_run(&phi0, |c| c[0], 0.1, 1000, 0.5, 10, None, &mut r).unwrap();
        let phi3 = rows[3].phi_mean[0];
        assert!((phi3 - 0.05).abs() < 0.02, "phi after iter 3 = {phi3}");
    }

    #[test]
    fn beta_toy_converges_to_reference_tail_mean() {
        // Bottom 10% of the uniform has mean 0.05; phi should land there
        // within about three iterations.
        let mut r = rng(7);
        let rows = beta_toy_run(0.1, 0.2, 0.5, 1000, 10, &mut r).unwrap();
        let phi3 = rows[3].phi_mean[0];
        assert!((phi3 - 0.05).abs() < 0.02, "phi after iter 3 = {phi3}");
        for row in &rows[3..] {
            assert!(
                (row.phi_mean[0] - 0.05).abs() < 0.03,
                "iter {} phi {}",
                row.iteration,
                row.phi_mean[0]
            );
        }
    }

    #[test]
    fn kl_to_reference_tail_never_exceeds_start() {
        // Log-likelihood of a frozen bottom-alpha reference sample under
        // D_phi must not drop below its starting level during the first
        // three iterations, in at least 90% of seeded runs.
        let mut good = 0;
        let total = 20;
        for seed in 0..total {
            let mut r = rng(100 + seed);
            let tail: Vec<f64> = (0..2000).map(|_| r.gen::<f64>() * 0.1).collect();
            let loglik = |phi_mean: f64| -> f64 {
                let d = BetaMeanParam { mean: phi_mean };
                tail.iter().map(|&c| d.log_density(&[c]).unwrap()).sum::<f64>() / tail.len() as f64
            };
            let rows = beta_toy_run(0.1, 0.2, 0.5, 1000, 3, &mut r).unwrap();
            let base = loglik(0.5);
            if rows[1..].iter().all(|row| loglik(row.phi[0]) >= base - 1e-9) {
                good += 1;
            }
        }
        assert!(good * 10 >= total * 9, "only {good}/{total} seeds improved");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn weights_finite_on_reference_support(
            p0 in 0.05..0.95f64,
            p1 in 0.05..0.95f64,
            seed in 0u64..500,
        ) {
            // Fixed-support invariant: weights of reference draws are finite
            // for any admissible shifted parameter.
            let phi0 = Product {
                components: vec![
                    Bernoulli { p: p0 },
                    ExponentialMean { mean: 5.0 },
                    BetaMeanParam { mean: p0 },
                ],
            };
            let phi = Product {
                components: vec![
                    Bernoulli { p: p1 },
                    ExponentialMean { mean: 0.3 },
                    BetaMeanParam { mean: p1 },
                ],
            };
            let mut r = rng(seed);
            for c in sample_contexts(&phi0, 20, &mut r).unwrap() {
                let w = density_ratio(&phi0, &phi, &c).unwrap();
                prop_assert!(w.is_finite() && w > 0.0);
            }
        }
    }
}
