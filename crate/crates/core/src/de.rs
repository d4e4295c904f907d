//! Differential evolution (rand/1/bin) for maximizing black-box objectives.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, PartialEq)]
pub struct DeConfig {
    pub population: usize,
    pub generations: usize,
    /// Differential weight, drawn uniformly from this range once per generation.
    pub mutation: (f64, f64),
    pub crossover: f64,
}

impl Default for DeConfig {
    fn default() -> Self {
        DeConfig {
            population: 15,
            generations: 100,
            mutation: (0.5, 1.0),
            crossover: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub evaluations: usize,
}

fn check(bounds: &[(f64, f64)], cfg: &DeConfig) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::Domain("no dimensions to optimize".into()));
    }
    if bounds.iter().any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo <= hi)) {
        return Err(Error::Domain("bounds must be finite with lo <= hi".into()));
    }
    if cfg.population < 4 {
        return Err(Error::Domain("population must be >= 4".into()));
    }
    if !(0.0..=1.0).contains(&cfg.crossover) || cfg.mutation.0 > cfg.mutation.1 || cfg.mutation.0 < 0.0 {
        return Err(Error::Domain("invalid mutation or crossover setting".into()));
    }
    Ok(())
}

/// Starts from a population drawn uniformly within `bounds`.
pub fn de_optimize<F, R>(
    objective: F,
    bounds: &[(f64, f64)],
    cfg: &DeConfig,
    repair: R,
    rng: &mut SimRng,
) -> Result<DeResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
    R: Fn(&mut [f64]),
{
    check(bounds, cfg)?;
    let population = (0..cfg.population)
        .map(|_| bounds.iter().map(|&(lo, hi)| if lo < hi { rng.random_range(lo..hi) } else { lo }).collect())
        .collect();
    de_optimize_from(objective, population, bounds, cfg, repair, rng)
}

/// `repair` maps every candidate into the feasible set before it is evaluated.
pub fn de_optimize_from<F, R>(
    objective: F,
    mut population: Vec<Vec<f64>>,
    bounds: &[(f64, f64)],
    cfg: &DeConfig,
    repair: R,
    rng: &mut SimRng,
) -> Result<DeResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
    R: Fn(&mut [f64]),
{
    let cfg = DeConfig {
        population: population.len(),
        ..cfg.clone()
    };
    check(bounds, &cfg)?;
    let dim = bounds.len();
    if population.iter().any(|p| p.len() != dim) {
        return Err(Error::Contract("population members must match the bounds".into()));
    }
    population.iter_mut().for_each(|p| repair(p));
    let evaluate = |cands: &[Vec<f64>]| -> Vec<f64> {
        cands
            .par_iter()
            .map(|c| {
                let v = objective(c);
                if v.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    v
                }
            })
            .collect()
    };
    let mut values = evaluate(&population);
    let mut evaluations = population.len();
    let np = population.len();

    for _ in 0..cfg.generations {
        let (flo, fhi) = cfg.mutation;
        let weight = if fhi > flo { rng.random_range(flo..fhi) } else { flo };
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let picks = loop {
                    let s = sample(rng, np, 3).into_vec();
                    if !s.contains(&i) {
                        break s;
                    }
                };
                let (a, b, c) = (&population[picks[0]], &population[picks[1]], &population[picks[2]]);
                let forced = rng.random_range(0..dim);
                let mut trial = population[i].clone();
                for j in 0..dim {
                    if j == forced || rng.random::<f64>() < cfg.crossover {
                        let (lo, hi) = bounds[j];
                        trial[j] = (a[j] + weight * (b[j] - c[j])).clamp(lo, hi);
                    }
                }
                repair(&mut trial);
                trial
            })
            .collect();
        let trial_values = evaluate(&trials);
        evaluations += np;
        for (i, (t, v)) in trials.into_iter().zip(trial_values).enumerate() {
            if v >= values[i] {
                population[i] = t;
                values[i] = v;
            }
        }
    }

    let (best_idx, best_value) = values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    Ok(DeResult {
        best: population[best_idx].clone(),
        best_value,
        evaluations,
    })
}

/// Sorts a candidate into descending order.
pub fn sort_descending(x: &mut [f64]) {
    x.sort_by(|a, b| b.total_cmp(a));
}
