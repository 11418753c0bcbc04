//! Return arithmetic, empirical quantiles, CVaR and importance-weight
//! bookkeeping shared by every other module.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default importance-weight clipping range.
pub const DEFAULT_WEIGHT_CLIP: (f64, f64) = (0.2, 5.0);

/// One rolled-out episode: observations, action indices and rewards, all of
/// equal length.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<usize>, rewards: Vec<f64>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptyInput("trajectory"));
        }
        if states.len() != actions.len() || actions.len() != rewards.len() {
            return Err(Error::DimensionMismatch {
                expected: states.len(),
                got: actions.len().min(rewards.len()),
            });
        }
        Ok(Self {
            states,
            actions,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Where an episode's context was sampled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EpisodeSource {
    /// Context drawn from the original distribution; weight is exactly 1.
    Reference,
    /// Context drawn from the current CE sampling distribution; weight is the
    /// clipped density ratio.
    Shifted,
}

/// One context + trajectory + return + importance weight; the atom of every
/// batch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub context: Vec<f64>,
    pub trajectory: Trajectory,
    pub ret: f64,
    pub weight: f64,
    pub source: EpisodeSource,
}

impl EpisodeRecord {
    pub fn validate(&self, weight_clip: (f64, f64)) -> Result<()> {
        match self.source {
            EpisodeSource::Reference => {
                if self.weight != 1.0 {
                    return Err(Error::invalid(format!(
                        "reference episode weight must be 1, got {}",
                        self.weight
                    )));
                }
            }
            EpisodeSource::Shifted => {
                if self.weight < weight_clip.0 || self.weight > weight_clip.1 {
                    return Err(Error::invalid(format!(
                        "shifted episode weight {} outside clip range [{}, {}]",
                        self.weight, weight_clip.0, weight_clip.1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A batch of episodes with all reference records before all shifted ones.
#[derive(Clone, Debug)]
pub struct ReturnBatch {
    records: Vec<EpisodeRecord>,
    n_reference: usize,
    n_shifted: usize,
}

impl ReturnBatch {
    pub fn new(records: Vec<EpisodeRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyInput("return batch"));
        }
        let n_reference = records
            .iter()
            .take_while(|r| r.source == EpisodeSource::Reference)
            .count();
        if records[n_reference..]
            .iter()
            .any(|r| r.source == EpisodeSource::Reference)
        {
            return Err(Error::invalid(
                "reference records must precede shifted records",
            ));
        }
        let n_shifted = records.len() - n_reference;
        Ok(Self {
            records,
            n_reference,
            n_shifted,
        })
    }

    pub fn records(&self) -> &[EpisodeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_reference(&self) -> usize {
        self.n_reference
    }

    pub fn n_shifted(&self) -> usize {
        self.n_shifted
    }

    pub fn reference(&self) -> &[EpisodeRecord] {
        &self.records[..self.n_reference]
    }

    pub fn returns(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.ret).collect()
    }

    pub fn reference_returns(&self) -> Vec<f64> {
        self.reference().iter().map(|r| r.ret).collect()
    }
}

/// Discounted return `sum_t gamma^t r_t`.
pub fn trajectory_return(rewards: &[f64], gamma: f64) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::EmptyInput("empty trajectory"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::invalid(format!("gamma must be in (0, 1], got {gamma}")));
    }
    let mut acc = 0.0;
    let mut discount = 1.0;
    for &r in rewards {
        acc += discount * r;
        discount *= gamma;
    }
    Ok(acc)
}

/// `ceil(x)` that snaps to the nearest integer when `x` is within `1e-9` of
/// it, so that e.g. `0.05 * 400` names the 20th order statistic rather than
/// the 21st.
pub(crate) fn ceil_snapped(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

/// `floor(x)` with the same snapping.
pub(crate) fn floor_snapped(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        x.floor() as usize
    }
}

/// Empirical `alpha`-quantile: the k-th smallest sample with
/// `k = ceil(alpha * n)`.
pub fn empirical_quantile(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("empirical_quantile"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!(
            "quantile level must be in (0, 1], got {alpha}"
        )));
    }
    let n = values.len();
    let k = ceil_snapped(alpha * n as f64).clamp(1, n);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[k - 1])
}

/// Mean of all samples at or below the empirical `alpha`-quantile.
pub fn cvar_of_samples(values: &[f64], alpha: f64) -> Result<f64> {
    let q = empirical_quantile(values, alpha)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for &v in values {
        if v <= q {
            sum += v;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Effective sample size `(sum w)^2 / sum w^2` of a set of positive weights.
pub fn effective_sample_size(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::EmptyInput("effective_sample_size"));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for &w in weights {
        if !(w > 0.0) {
            return Err(Error::invalid(format!("weights must be positive, got {w}")));
        }
        sum += w;
        sum_sq += w * w;
    }
    Ok(sum * sum / sum_sq)
}
