use crate::error::{Error, Result};

const TIME_SLACK: f64 = 1e-9;

/// Collects the rewards accrued during one macro-action and folds them into a
/// single continuously discounted reward.
///
/// Impulses are weighted by `exp(-gamma * tau)`, piecewise-constant rate
/// segments are integrated in closed form against the same kernel. Times are
/// relative to the start of the macro-action.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardAccumulator {
    gamma: f64,
    impulses: Vec<(f64, f64)>,
    rate_segments: Vec<(f64, f64, f64)>,
}

impl RewardAccumulator {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::Domain(format!("discount rate must be >= 0, got {gamma}")));
        }
        Ok(RewardAccumulator {
            gamma,
            impulses: Vec::new(),
            rate_segments: Vec::new(),
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_empty(&self) -> bool {
        self.impulses.is_empty() && self.rate_segments.is_empty()
    }

    pub fn accrue_impulse(&mut self, tau: f64, rho: f64) -> Result<()> {
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::Domain(format!("impulse time must be >= 0, got {tau}")));
        }
        if !rho.is_finite() {
            return Err(Error::Domain(format!("non-finite reward {rho}")));
        }
        self.impulses.push((tau, rho));
        Ok(())
    }

    pub fn accrue_rate(&mut self, t0: f64, t1: f64, c: f64) -> Result<()> {
        if !(t0.is_finite() && t1.is_finite() && t0 >= 0.0 && t1 > t0) {
            return Err(Error::Domain(format!(
                "rate segment needs 0 <= t0 < t1, got [{t0}, {t1}]"
            )));
        }
        if !c.is_finite() {
            return Err(Error::Domain(format!("non-finite reward rate {c}")));
        }
        if self
            .rate_segments
            .iter()
            .any(|&(a, b, _)| t0 < b - TIME_SLACK && a < t1 - TIME_SLACK)
        {
            return Err(Error::Domain(format!(
                "rate segment [{t0}, {t1}] overlaps an existing segment"
            )));
        }
        self.rate_segments.push((t0, t1, c));
        Ok(())
    }

    fn segment_value(&self, t0: f64, t1: f64, c: f64) -> f64 {
        if self.gamma == 0.0 {
            c * (t1 - t0)
        } else {
            // exp(-g t0) - exp(-g t1) computed without cancellation
            let g = self.gamma;
            c * (-g * t0).exp() * -(-g * (t1 - t0)).exp_m1() / g
        }
    }

    /// Discounted value of everything accrued, for a macro-action lasting `dt`.
    /// Resets the accumulator.
    pub fn settle(&mut self, dt: f64) -> Result<f64> {
        if let Some(&(tau, _)) = self.impulses.iter().find(|&&(tau, _)| tau > dt + TIME_SLACK) {
            return Err(Error::Consistency(format!(
                "impulse at {tau}s lies beyond macro-action duration {dt}s"
            )));
        }
        if let Some(&(_, t1, _)) = self
            .rate_segments
            .iter()
            .find(|&&(_, t1, _)| t1 > dt + TIME_SLACK)
        {
            return Err(Error::Consistency(format!(
                "rate segment ending at {t1}s lies beyond macro-action duration {dt}s"
            )));
        }
        let impulses: f64 = self
            .impulses
            .iter()
            .map(|&(tau, rho)| (-self.gamma * tau).exp() * rho)
            .sum();
        let rates: f64 = self
            .rate_segments
            .iter()
            .map(|&(t0, t1, c)| self.segment_value(t0, t1, c))
            .sum();
        self.impulses.clear();
        self.rate_segments.clear();
        Ok(impulses + rates)
    }
}
