//! Advantage estimation for temporally extended actions.
//!
//! Per-step discounts of ordinary GAE are replaced by exponentials of the
//! elapsed macro-action time: the TD residual discounts the bootstrap value
//! by `exp(-gamma * dt_k)` and the advantage sums residuals weighted by
//! `exp(-gamma * lambda * (T_{k+l} - T_k))`.

use crate::error::{Error, Result};
use crate::macdec::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MGaeConfig {
    /// Continuous discount rate, 1/s.
    pub gamma: f64,
    /// Mixing parameter; values above one are allowed.
    pub lambda: f64,
}

impl MGaeConfig {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma >= 0.0) {
            return Err(Error::Domain(format!("gamma must be >= 0, got {gamma}")));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Domain(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(MGaeConfig { gamma, lambda })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEstimate {
    pub deltas: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// `values[k]` is the baseline at the observation of transition `k`;
/// `values[n]` bootstraps the post-trajectory observation and is ignored for
/// terminal trajectories.
pub fn td_residuals(traj: &Trajectory, values: &[f64], cfg: &MGaeConfig) -> Result<Vec<f64>> {
    let n = traj.transitions.len();
    if values.len() != n + 1 {
        return Err(Error::Contract(format!(
            "expected {} baseline values for {n} transitions, got {}",
            n + 1,
            values.len()
        )));
    }
    Ok(traj
        .transitions
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let next = if t.terminal { 0.0 } else { values[k + 1] };
            t.reward + (-cfg.gamma * t.duration).exp() * next - values[k]
        })
        .collect())
}

pub fn advantages(deltas: &[f64], traj: &Trajectory, cfg: &MGaeConfig) -> Result<Vec<f64>> {
    if deltas.len() != traj.transitions.len() {
        return Err(Error::Contract(format!(
            "{} residuals for {} transitions",
            deltas.len(),
            traj.transitions.len()
        )));
    }
    let mut out = vec![0.0; deltas.len()];
    let mut acc = 0.0;
    for k in (0..deltas.len()).rev() {
        // weight of the tail is exp(-gamma*lambda*dt_k); a terminal cuts it off
        let t = &traj.transitions[k];
        let decay = if t.terminal {
            0.0
        } else {
            (-cfg.gamma * cfg.lambda * t.duration).exp()
        };
        acc = deltas[k] + decay * acc;
        out[k] = acc;
    }
    Ok(out)
}

pub fn discounted_returns(traj: &Trajectory, cfg: &MGaeConfig) -> Vec<f64> {
    let mut out = vec![0.0; traj.transitions.len()];
    let mut acc = 0.0;
    for (k, t) in traj.transitions.iter().enumerate().rev() {
        acc = t.reward + (-cfg.gamma * t.duration).exp() * acc;
        out[k] = acc;
    }
    out
}

pub fn estimate(traj: &Trajectory, values: &[f64], cfg: &MGaeConfig) -> Result<AdvantageEstimate> {
    let deltas = td_residuals(traj, values, cfg)?;
    let advantages = advantages(&deltas, traj, cfg)?;
    let returns = discounted_returns(traj, cfg);
    Ok(AdvantageEstimate {
        deltas,
        advantages,
        returns,
    })
}

/// Textbook discrete-step GAE. `values` has one more entry than `rewards`
/// (the bootstrap value, 0 for a terminal end).
pub fn discrete_gae(rewards: &[f64], values: &[f64], gamma_d: f64, lambda_d: f64) -> Vec<f64> {
    assert_eq!(values.len(), rewards.len() + 1, "values must include a bootstrap entry");
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for k in (0..rewards.len()).rev() {
        let delta = rewards[k] + gamma_d * values[k + 1] - values[k];
        acc = delta + gamma_d * lambda_d * acc;
        out[k] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::macdec::{Observation, Transition};

    fn traj(steps: &[(f64, f64)], terminal: bool) -> Trajectory {
        let n = steps.len();
        Trajectory {
            episode: 0,
            agent: 0,
            start_time: 0.0,
            transitions: steps
                .iter()
                .enumerate()
                .map(|(k, &(dt, r))| Transition {
                    observation: Observation(vec![]),
                    action: 0,
                    duration: dt,
                    reward: r,
                    terminal: terminal && k + 1 == n,
                })
                .collect(),
            final_observation: (!terminal).then(|| Observation(vec![])),
        }
    }

    fn cfg(g: f64, l: f64) -> MGaeConfig {
        MGaeConfig::new(g, l).unwrap()
    }

    #[test]
    fn residual_examples() {
        let t = traj(&[(1.0, 1.0)], true);
        assert_eq!(td_residuals(&t, &[0.0, 5.0], &cfg(0.02, 1.0)).unwrap(), vec![1.0]);

        let t = traj(&[(3.0, 1.0)], false);
        let d = td_residuals(&t, &[1.0, 2.0], &cfg(0.02, 1.0)).unwrap();
        assert!((d[0] - 1.883529).abs() < 1e-6);

        let t = traj(&[(7.5, 2.0)], false);
        let d = td_residuals(&t, &[1.0, 4.0], &cfg(0.0, 1.0)).unwrap();
        assert_eq!(d[0], 2.0 + 4.0 - 1.0);

        assert!(td_residuals(&t, &[1.0], &cfg(0.0, 1.0)).is_err());
    }

    #[test]
    fn advantage_examples() {
        let t = traj(&[(3.0, 0.0), (1.0, 0.0)], false);
        let a = advantages(&[1.0, 2.0], &t, &cfg(0.02, 1.0)).unwrap();
        assert_eq!(a[1], 2.0);
        assert!((a[0] - 2.883529).abs() < 1e-6);
    }

    #[test]
    fn return_examples() {
        let t = traj(&[(2.0, 1.0), (4.0, 2.0), (1.0, 3.0)], true);
        assert_eq!(discounted_returns(&t, &cfg(0.0, 1.0)), vec![6.0, 5.0, 3.0]);

        let t = traj(&[(3.0, 1.0), (1.0, 1.0)], true);
        assert!((discounted_returns(&t, &cfg(0.02, 1.0))[0] - 1.941765).abs() < 1e-6);

        let t = traj(&[(3.0, 4.5)], true);
        assert_eq!(discounted_returns(&t, &cfg(0.3, 1.0)), vec![4.5]);
    }

    #[test]
    fn discrete_gae_limits() {
        let rewards = [1.0, -2.0, 0.5];
        let values = [0.3, 0.1, -0.4, 0.0];
        let a = discrete_gae(&rewards, &values, 0.9, 0.0);
        for k in 0..3 {
            let delta = rewards[k] + 0.9 * values[k + 1] - values[k];
            assert!((a[k] - delta).abs() < 1e-15);
        }
        let a = discrete_gae(&rewards, &[0.0; 4], 1.0, 1.0);
        assert_eq!(a, vec![-0.5, -1.5, 0.5]);
    }

    #[test]
    fn exact_baseline_with_zero_lambda_gives_zero_advantage() {
        let t = traj(&[(3.0, 1.0), (2.0, -1.0), (5.0, 2.0)], true);
        let c = cfg(0.05, 0.0);
        let mut values = discounted_returns(&t, &c);
        values.push(0.0);
        let a = advantages(&td_residuals(&t, &values, &c).unwrap(), &t, &c).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1e-12));
    }
}
