#![allow(dead_code)]

use eventrl_core::nn::forward_policy;
use eventrl_core::trpo::SurrogateBatch;
use eventrl_core::{MGaeConfig, MlpParams, NetworkShape, Observation, SimRng, Trajectory, Transition};
use rand::Rng;

/// Advantages as the explicit double sum over residuals, each recomputed from
/// absolute start times. Shares no code with the library's reverse pass.
pub fn brute_force_advantages(traj: &Trajectory, values: &[f64], cfg: &MGaeConfig) -> Vec<f64> {
    let n = traj.transitions.len();
    let mut starts = vec![0.0; n];
    for k in 1..n {
        starts[k] = starts[k - 1] + traj.transitions[k - 1].duration;
    }
    let delta = |l: usize| {
        let t = &traj.transitions[l];
        let next = if t.terminal { 0.0 } else { values[l + 1] };
        t.reward + (-cfg.gamma * t.duration).exp() * next - values[l]
    };
    (0..n)
        .map(|k| {
            (k..n)
                .map(|l| (-cfg.gamma * cfg.lambda * (starts[l] - starts[k])).exp() * delta(l))
                .sum()
        })
        .collect()
}

pub fn random_trajectory(rng: &mut SimRng, len: usize, unit_durations: bool) -> (Trajectory, Vec<f64>) {
    let terminal = rng.random_bool(0.5);
    let transitions: Vec<Transition> = (0..len)
        .map(|k| Transition {
            observation: Observation(vec![k as f64]),
            action: 0,
            duration: if unit_durations { 1.0 } else { rng.random_range(0.05..5.0) },
            reward: rng.random_range(-3.0..3.0),
            terminal: terminal && k + 1 == len,
        })
        .collect();
    let values: Vec<f64> = (0..=len).map(|_| rng.random_range(-5.0..5.0)).collect();
    let traj = Trajectory {
        episode: 0,
        agent: 0,
        start_time: 0.0,
        transitions,
        final_observation: (!terminal).then(|| Observation(vec![len as f64])),
    };
    (traj, values)
}

pub fn random_batch(rng: &mut SimRng, shape: &NetworkShape, old: &MlpParams, n: usize) -> SurrogateBatch {
    let observations: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..shape.input_dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let actions = observations
        .iter()
        .map(|o| forward_policy(old, &Observation(o.clone())).unwrap().sample(rng))
        .collect();
    let mut advantages: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    eventrl_core::trpo::normalize(&mut advantages);
    SurrogateBatch::new(old, observations, actions, advantages, vec![1.0; n]).unwrap()
}

/// Largest elementwise relative error, floored at `floor` in the denominator.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central finite-difference gradient of `f` at `theta`.
pub fn numerical_gradient<F: Fn(&MlpParams) -> f64>(theta: &MlpParams, f: F, h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let mut plus = theta.clone();
            plus.as_flat_mut()[i] += h;
            let mut minus = theta.clone();
            minus.as_flat_mut()[i] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
