//! Soft risk-level scheduling.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear descent of the optimizer's risk level from 1 down to `alpha` over
/// the first `rho` fraction of training, then constant.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RiskSchedule {
    /// Target risk level.
    pub alpha: f64,
    /// Fraction of training spent descending.
    pub rho: f64,
    /// Total training steps.
    pub total_steps: usize,
}

impl RiskSchedule {
    pub fn new(alpha: f64, rho: f64, total_steps: usize) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("alpha must be in (0, 1), got {alpha}")));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::invalid(format!("rho must be in (0, 1], got {rho}")));
        }
        Ok(Self {
            alpha,
            rho,
            total_steps,
        })
    }
}

/// `alpha'(m) = max(alpha, 1 - (1 - alpha) * m / (rho * M))` for a 1-indexed
/// step `m`.
pub fn soft_risk_level(m: usize, schedule: &RiskSchedule) -> Result<f64> {
    if m < 1 || m > schedule.total_steps {
        return Err(Error::OutOfRange(format!(
            "step {m} outside [1, {}]",
            schedule.total_steps
        )));
    }
    // Steady-state phase; comparing step indices directly avoids float dust
    // in the formula leaving alpha' a hair above alpha at the boundary.
    if m as f64 >= schedule.rho * schedule.total_steps as f64 - 1e-9 {
        return Ok(schedule.alpha);
    }
    let descent =
        1.0 - (1.0 - schedule.alpha) * m as f64 / (schedule.rho * schedule.total_steps as f64);
    Ok(descent.max(schedule.alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_boundaries() {
        let s = RiskSchedule::new(0.05, 0.8, 250).unwrap();
        // m -> 0 limit is 1; the first real step is just below it.
        let first = soft_risk_level(1, &s).unwrap();
        assert!(first < 1.0 && first > 0.99);
        // At m = rho * M the descent reaches alpha exactly.
        assert_eq!(soft_risk_level(200, &s).unwrap(), 0.05);
        assert_eq!(soft_risk_level(250, &s).unwrap(), 0.05);
    }

    #[test]
    fn midpoint_value() {
        let s = RiskSchedule::new(0.05, 0.8, 250).unwrap();
        let v = soft_risk_level(100, &s).unwrap();
        assert!((v - 0.525).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_rejected() {
        let s = RiskSchedule::new(0.05, 0.8, 250).unwrap();
        assert!(soft_risk_level(0, &s).is_err());
        assert!(soft_risk_level(251, &s).is_err());
    }

    #[test]
    fn non_increasing_and_bounded() {
        let s = RiskSchedule::new(0.1, 0.6, 400).unwrap();
        let mut prev = 1.0;
        for m in 1..=400 {
            let v = soft_risk_level(m, &s).unwrap();
            assert!(v <= prev + 1e-15);
            assert!((s.alpha..=1.0).contains(&v));
            if m as f64 >= s.rho * 400.0 {
                assert_eq!(v, s.alpha);
            }
            prev = v;
        }
    }
}
