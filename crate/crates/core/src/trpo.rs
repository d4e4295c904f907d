//! Parameter-shared trust-region policy optimization over macro-action trajectories.
//!
//! Every agent samples from the same policy network. After a batch of
//! episodes, all agents' transitions are pooled, advantages come from
//! [`crate::mgae`], the policy takes a KL-constrained natural-gradient step
//! and the baseline is regressed onto discounted returns.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::macdec::{collect_batch, EpisodeBatch, Environment, Observation};
use crate::mgae::{self, MGaeConfig};
use crate::nn::{backprop, CategoricalDist, MlpParams, MlpPolicy, NetworkShape};
use crate::rng::{stream, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrpoConfig {
    pub max_kl: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    pub baseline_epochs: usize,
    pub baseline_learning_rate: f64,
    pub baseline_minibatch: usize,
    pub batch_episodes: usize,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        TrpoConfig {
            max_kl: 0.01,
            cg_iters: 10,
            cg_damping: 0.1,
            backtrack_ratio: 0.8,
            max_backtracks: 10,
            baseline_epochs: 10,
            baseline_learning_rate: 0.05,
            baseline_minibatch: 64,
            batch_episodes: 540,
        }
    }
}

impl TrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_kl > 0.0 && self.max_kl.is_finite()) {
            return Err(Error::Domain(format!("max_kl must be > 0, got {}", self.max_kl)));
        }
        if self.cg_iters == 0 {
            return Err(Error::Domain("cg_iters must be >= 1".into()));
        }
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return Err(Error::Domain("backtrack_ratio must lie in (0, 1)".into()));
        }
        if self.cg_damping < 0.0 || self.baseline_learning_rate < 0.0 {
            return Err(Error::Domain("damping and learning rate must be >= 0".into()));
        }
        if self.baseline_minibatch == 0 || self.batch_episodes == 0 {
            return Err(Error::Domain("minibatch and batch sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pooled samples for one policy update, together with the behaviour
/// policy's distributions they were drawn from.
#[derive(Debug, Clone)]
pub struct SurrogateBatch {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub advantages: Vec<f64>,
    pub old_log_probs: Vec<f64>,
    pub old_dists: Vec<CategoricalDist>,
    pub durations: Vec<f64>,
}

impl SurrogateBatch {
    pub fn new(
        old: &MlpParams,
        observations: Vec<Vec<f64>>,
        actions: Vec<usize>,
        advantages: Vec<f64>,
        durations: Vec<f64>,
    ) -> Result<Self> {
        let n = observations.len();
        if actions.len() != n || advantages.len() != n || durations.len() != n {
            return Err(Error::Contract("surrogate batch columns differ in length".into()));
        }
        if advantages.iter().any(|a| !a.is_finite()) {
            return Err(Error::Numerical("non-finite advantage".into()));
        }
        let old_dists = dists(old, &observations)?;
        let n_actions = old.shape().output_dim;
        if let Some(a) = actions.iter().find(|&&a| a >= n_actions) {
            return Err(Error::Contract(format!("action {a} outside policy head")));
        }
        let old_log_probs = old_dists
            .iter()
            .zip(&actions)
            .map(|(d, &a)| d.log_prob(a))
            .collect();
        Ok(SurrogateBatch {
            observations,
            actions,
            advantages,
            old_log_probs,
            old_dists,
            durations,
        })
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

fn dists(params: &MlpParams, observations: &[Vec<f64>]) -> Result<Vec<CategoricalDist>> {
    observations
        .par_iter()
        .map(|x| Ok(CategoricalDist::from_logits(&params.forward(x)?)))
        .collect()
}

/// Rescales to zero mean and unit variance; constant inputs map to all zeros.
pub fn normalize(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in values.iter_mut() {
        *v = if std > 1e-12 { (*v - mean) / std } else { 0.0 };
    }
}

/// Mean importance-weighted advantage; larger is better.
pub fn surrogate_loss(theta: &MlpParams, batch: &SurrogateBatch) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let new = dists(theta, &batch.observations)?;
    let total: f64 = new
        .iter()
        .enumerate()
        .map(|(i, d)| (d.log_prob(batch.actions[i]) - batch.old_log_probs[i]).exp() * batch.advantages[i])
        .sum();
    Ok(total / batch.len() as f64)
}

pub fn surrogate_gradient(theta: &MlpParams, batch: &SurrogateBatch) -> Result<Vec<f64>> {
    let new = dists(theta, &batch.observations)?;
    let grads: Vec<Vec<f64>> = new
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let a = batch.actions[i];
            let w = (d.log_prob(a) - batch.old_log_probs[i]).exp() * batch.advantages[i];
            let mut g: Vec<f64> = d.probs().iter().map(|p| -w * p).collect();
            g[a] += w;
            g
        })
        .collect();
    backprop(theta, &batch.observations, &grads)
}

/// Mean `KL(old || theta)` over the batch.
pub fn mean_kl(theta: &MlpParams, batch: &SurrogateBatch) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let new = dists(theta, &batch.observations)?;
    let total: f64 = batch.old_dists.iter().zip(&new).map(|(o, n)| o.kl(n)).sum();
    Ok(total / batch.len() as f64)
}

pub fn kl_gradient(theta: &MlpParams, batch: &SurrogateBatch) -> Result<Vec<f64>> {
    let new = dists(theta, &batch.observations)?;
    let grads: Vec<Vec<f64>> = new
        .iter()
        .zip(&batch.old_dists)
        .map(|(n, o)| n.probs().iter().zip(o.probs()).map(|(pn, po)| pn - po).collect())
        .collect();
    backprop(theta, &batch.observations, &grads)
}

/// `(H + damping I) v`, with `H` the Hessian of the mean KL at `theta = old`,
/// i.e. the Fisher matrix `mean J^T (diag p - p p^T) J` of the softmax head.
pub fn fisher_vector_product(
    theta: &MlpParams,
    batch: &SurrogateBatch,
    v: &[f64],
    damping: f64,
) -> Result<Vec<f64>> {
    if v.len() != theta.len() {
        return Err(Error::Contract("vector length does not match parameters".into()));
    }
    let out_grads: Vec<Vec<f64>> = batch
        .observations
        .par_iter()
        .map(|x| {
            let p = CategoricalDist::from_logits(&theta.forward(x)?).probs();
            let u = theta.jvp(x, v)?;
            let pu: f64 = p.iter().zip(&u).map(|(a, b)| a * b).sum();
            Ok(p.iter().zip(&u).map(|(pi, ui)| pi * (ui - pu)).collect())
        })
        .collect::<Result<_>>()?;
    let mut hv = backprop(theta, &batch.observations, &out_grads)?;
    for (h, vi) in hv.iter_mut().zip(v) {
        *h += damping * vi;
    }
    Ok(hv)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

/// Approximately solves `A x = g` for symmetric positive definite `A`.
pub fn conjugate_gradient<F>(op: F, g: &[f64], iters: usize) -> Result<CgSolution>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let mut x = vec![0.0; g.len()];
    let mut r = g.to_vec();
    let mut p = g.to_vec();
    let mut rr = dot(&r, &r);
    let mut done = 0;
    for _ in 0..iters {
        if rr < 1e-20 {
            break;
        }
        let ap = op(&p)?;
        let pap = dot(&p, &ap);
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::Numerical(format!("curvature p'Ap = {pap}")));
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        if !rr_new.is_finite() {
            return Err(Error::Numerical("non-finite residual".into()));
        }
        let beta = rr_new / rr;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        done += 1;
    }
    Ok(CgSolution {
        x,
        residual_norm: rr.sqrt(),
        iterations: done,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateReport {
    /// Mean KL between the old and accepted policies (0 when rejected).
    pub mean_kl: f64,
    pub surrogate_improvement: f64,
    /// Fraction of the full trust-region step that was accepted.
    pub step_fraction: f64,
    pub grad_norm: f64,
    pub backtracks: usize,
    pub cg_residual: f64,
}

pub fn trust_region_step(
    theta: &MlpParams,
    batch: &SurrogateBatch,
    cfg: &TrpoConfig,
) -> Result<(MlpParams, UpdateReport)> {
    let unchanged = |report| Ok((theta.clone(), report));
    if batch.is_empty() {
        return unchanged(UpdateReport::default());
    }
    let surr_old = surrogate_loss(theta, batch)?;
    let g = surrogate_gradient(theta, batch)?;
    let grad_norm = dot(&g, &g).sqrt();
    let mut report = UpdateReport {
        grad_norm,
        ..Default::default()
    };
    if grad_norm < 1e-12 {
        return unchanged(report);
    }
    let fvp = |v: &[f64]| fisher_vector_product(theta, batch, v, cfg.cg_damping);
    let cg = conjugate_gradient(fvp, &g, cfg.cg_iters)?;
    report.cg_residual = cg.residual_norm;
    let shs = dot(&cg.x, &fvp(&cg.x)?);
    if !(shs.is_finite() && shs > 0.0) {
        return Err(Error::Numerical(format!("step curvature {shs}")));
    }
    let scale = (2.0 * cfg.max_kl / shs).sqrt();
    let full: Vec<f64> = cg.x.iter().map(|d| d * scale).collect();

    let mut frac = 1.0;
    for k in 0..cfg.max_backtracks.max(1) {
        let candidate = theta.offset(&full, frac);
        let kl = mean_kl(&candidate, batch)?;
        let surr = surrogate_loss(&candidate, batch)?;
        if kl.is_finite() && surr.is_finite() && kl <= cfg.max_kl && surr > surr_old {
            report.mean_kl = kl;
            report.surrogate_improvement = surr - surr_old;
            report.step_fraction = frac;
            report.backtracks = k;
            return Ok((candidate, report));
        }
        frac *= cfg.backtrack_ratio;
    }
    report.backtracks = cfg.max_backtracks;
    unchanged(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BaselineFitReport {
    pub mse_before: f64,
    pub mse_after: f64,
    pub reverted: bool,
}

fn mse<X: AsRef<[f64]> + Sync>(phi: &MlpParams, xs: &[X], ys: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = xs
        .par_iter()
        .zip(ys)
        .map(|(x, y)| Ok((phi.forward(x.as_ref())?[0] - y).powi(2)))
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(total / xs.len() as f64)
}

/// Rewrites the output layer so that `out' = (out - shift) / scale`.
fn rescale_output(phi: &mut MlpParams, shift: f64, scale: f64) {
    let layers = phi.shape().layers();
    let offset: usize = layers[..layers.len() - 1].iter().map(|&(i, o)| i * o + o).sum();
    let (fan_in, _) = layers[layers.len() - 1];
    let flat = phi.as_flat_mut();
    for w in &mut flat[offset..offset + fan_in] {
        *w /= scale;
    }
    flat[offset + fan_in] = (flat[offset + fan_in] - shift) / scale;
}

/// Mini-batch gradient descent on mean squared error.
///
/// Targets are standardized with the batch statistics while fitting and the
/// output layer is mapped back afterwards, so the returned network predicts
/// in the original units. If the fit makes the error worse, `phi` is kept.
pub fn fit_baseline<X: AsRef<[f64]> + Sync>(
    phi: &MlpParams,
    observations: &[X],
    returns: &[f64],
    cfg: &TrpoConfig,
    rng: &mut SimRng,
) -> Result<(MlpParams, BaselineFitReport)> {
    if observations.len() != returns.len() {
        return Err(Error::Contract("observations and returns differ in length".into()));
    }
    if phi.shape().output_dim != 1 {
        return Err(Error::Contract("baseline must have a single output".into()));
    }
    let mse_before = mse(phi, observations, returns)?;
    if observations.is_empty() {
        return Ok((phi.clone(), BaselineFitReport::default()));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std > 1e-8 { std } else { 1.0 };
    let targets: Vec<f64> = returns.iter().map(|r| (r - mean) / scale).collect();

    let mut work = phi.clone();
    rescale_output(&mut work, mean, scale);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    for _ in 0..cfg.baseline_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.baseline_minibatch) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| observations[i].as_ref()).collect();
            let gs: Vec<[f64; 1]> = chunk
                .iter()
                .zip(&xs)
                .map(|(&i, x)| Ok([2.0 * (work.forward(x)?[0] - targets[i])]))
                .collect::<Result<_>>()?;
            let grad = backprop(&work, &xs, &gs)?;
            for (p, g) in work.as_flat_mut().iter_mut().zip(&grad) {
                *p -= cfg.baseline_learning_rate * g;
            }
        }
    }
    rescale_output(&mut work, -mean / scale, 1.0 / scale);

    let mse_after = mse(&work, observations, returns)?;
    if !mse_after.is_finite() || mse_after > mse_before {
        return Ok((
            phi.clone(),
            BaselineFitReport {
                mse_before,
                mse_after: mse_before,
                reverted: true,
            },
        ));
    }
    Ok((
        work,
        BaselineFitReport {
            mse_before,
            mse_after,
            reverted: false,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub trpo: TrpoConfig,
    pub mgae: MGaeConfig,
    pub epochs: usize,
    /// Episode horizon in simulated seconds.
    pub horizon: f64,
    pub seed: u64,
    pub hidden_sizes: Vec<usize>,
    /// Record elapsed wall-clock seconds in the training curve (logs only).
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_return: f64,
    pub mean_discounted_return: f64,
    pub kl: f64,
    pub surrogate_improvement: f64,
    pub step_fraction: f64,
    pub grad_norm: f64,
    /// Spread of the policy gradient across episode subsets, `mean ||g_s - g||^2`.
    pub grad_variance: f64,
    pub baseline_mse: f64,
    pub samples: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: MlpParams,
    pub baseline: MlpParams,
    pub curve: Vec<EpochStats>,
}

const GRADIENT_GROUPS: usize = 4;

/// Pooled per-sample data of one epoch.
struct Pool {
    observations: Vec<Vec<f64>>,
    baseline_inputs: Vec<Vec<f64>>,
    actions: Vec<usize>,
    advantages: Vec<f64>,
    returns: Vec<f64>,
    durations: Vec<f64>,
    episodes: Vec<usize>,
}

/// Baseline regressor input: the observation followed by the decision
/// time as a fraction of the horizon.
pub fn baseline_input(obs: &[f64], time: f64, horizon: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(obs.len() + 1);
    x.extend_from_slice(obs);
    x.push(if horizon.is_finite() && horizon > 0.0 { time / horizon } else { 0.0 });
    x
}

type TrajectoryEstimate = (Vec<Vec<f64>>, Vec<f64>, Vec<f64>);

fn pool_batch(
    batch: &EpisodeBatch,
    baseline: &MlpParams,
    mgae_cfg: &MGaeConfig,
    horizon: f64,
) -> Result<Pool> {
    let per_traj: Vec<TrajectoryEstimate> = batch
        .trajectories
        .par_iter()
        .map(|traj| {
            let times = traj.cumulative_times();
            let inputs: Vec<Vec<f64>> = traj
                .transitions
                .iter()
                .zip(&times)
                .map(|(t, &dt)| baseline_input(t.observation.as_slice(), traj.start_time + dt, horizon))
                .collect();
            let mut values = inputs
                .iter()
                .map(|x| Ok(baseline.forward(x)?[0]))
                .collect::<Result<Vec<f64>>>()?;
            values.push(match &traj.final_observation {
                Some(o) => {
                    let end = traj.start_time + times[times.len() - 1];
                    baseline.forward(&baseline_input(o.as_slice(), end, horizon))?[0]
                }
                None => 0.0,
            });
            let est = mgae::estimate(traj, &values, mgae_cfg)?;
            Ok((inputs, est.advantages, est.returns))
        })
        .collect::<Result<_>>()?;
    let n = batch.n_transitions();
    let mut pool = Pool {
        observations: Vec::with_capacity(n),
        baseline_inputs: Vec::with_capacity(n),
        actions: Vec::with_capacity(n),
        advantages: Vec::with_capacity(n),
        returns: Vec::with_capacity(n),
        durations: Vec::with_capacity(n),
        episodes: Vec::with_capacity(n),
    };
    for (traj, (inputs, adv, ret)) in batch.trajectories.iter().zip(per_traj) {
        pool.baseline_inputs.extend(inputs);
        for (k, t) in traj.transitions.iter().enumerate() {
            pool.observations.push(t.observation.0.clone());
            pool.actions.push(t.action);
            pool.durations.push(t.duration);
            pool.episodes.push(traj.episode);
            pool.advantages.push(adv[k]);
            pool.returns.push(ret[k]);
        }
    }
    normalize(&mut pool.advantages);
    Ok(pool)
}

fn gradient_variance(theta: &MlpParams, batch: &SurrogateBatch, episodes: &[usize]) -> Result<f64> {
    let full = surrogate_gradient(theta, batch)?;
    let mut total = 0.0;
    let mut groups = 0;
    for g in 0..GRADIENT_GROUPS {
        let idx: Vec<usize> = (0..batch.len()).filter(|&i| episodes[i] % GRADIENT_GROUPS == g).collect();
        if idx.is_empty() {
            continue;
        }
        let sub = SurrogateBatch {
            observations: idx.iter().map(|&i| batch.observations[i].clone()).collect(),
            actions: idx.iter().map(|&i| batch.actions[i]).collect(),
            advantages: idx.iter().map(|&i| batch.advantages[i]).collect(),
            old_log_probs: idx.iter().map(|&i| batch.old_log_probs[i]).collect(),
            old_dists: idx.iter().map(|&i| batch.old_dists[i].clone()).collect(),
            durations: idx.iter().map(|&i| batch.durations[i]).collect(),
        };
        let gs = surrogate_gradient(theta, &sub)?;
        total += gs.iter().zip(&full).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        groups += 1;
    }
    Ok(if groups == 0 { 0.0 } else { total / groups as f64 })
}

/// Runs parameter-shared TRPO. `on_epoch` sees the stats and the updated
/// policy and baseline after every epoch (used for checkpointing).
pub fn train<E, F, C>(factory: F, cfg: &TrainConfig, mut on_epoch: C) -> Result<TrainOutcome>
where
    E: Environment,
    F: Fn() -> E + Sync,
    C: FnMut(&EpochStats, &MlpParams, &MlpParams) -> Result<()>,
{
    cfg.trpo.validate()?;
    let probe = factory();
    let obs_dim = probe.observation_dim();
    let n_actions = probe.n_actions();
    drop(probe);

    let mut init_rng = stream(cfg.seed, &[u64::MAX, 0]);
    let mut policy = MlpParams::init(
        NetworkShape::new(obs_dim, cfg.hidden_sizes.clone(), n_actions)?,
        &mut init_rng,
    );
    let mut baseline = MlpParams::init(
        NetworkShape::new(obs_dim + 1, cfg.hidden_sizes.clone(), 1)?,
        &mut init_rng,
    );
    let started = Instant::now();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let behaviour = MlpPolicy::new(policy.clone());
        let batch = collect_batch(
            &factory,
            &behaviour,
            cfg.trpo.batch_episodes,
            cfg.seed,
            epoch as u64,
            cfg.horizon,
            cfg.mgae.gamma,
        )?;
        debug_assert_eq!(behaviour.params, policy, "all agents share one parameter snapshot");

        let pool = pool_batch(&batch, &baseline, &cfg.mgae, cfg.horizon)?;
        let samples = pool.observations.len();
        let surrogate = SurrogateBatch::new(
            &policy,
            pool.observations,
            pool.actions,
            pool.advantages,
            pool.durations,
        )?;
        let grad_variance = gradient_variance(&policy, &surrogate, &pool.episodes)?;
        let (next_policy, report) = trust_region_step(&policy, &surrogate, &cfg.trpo)?;
        policy = next_policy;

        let mut fit_rng = stream(cfg.seed, &[u64::MAX, 1, epoch as u64]);
        let (next_baseline, fit) = fit_baseline(
            &baseline,
            &pool.baseline_inputs,
            &pool.returns,
            &cfg.trpo,
            &mut fit_rng,
        )?;
        baseline = next_baseline;

        let stats = EpochStats {
            epoch,
            mean_return: batch.mean_return(),
            mean_discounted_return: batch.mean_discounted_return(),
            kl: report.mean_kl,
            surrogate_improvement: report.surrogate_improvement,
            step_fraction: report.step_fraction,
            grad_norm: report.grad_norm,
            grad_variance,
            baseline_mse: fit.mse_after,
            samples,
            wall_seconds: if cfg.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        on_epoch(&stats, &policy, &baseline)?;
        curve.push(stats);
    }
    Ok(TrainOutcome {
        policy,
        baseline,
        curve,
    })
}

/// Observation rows of a batch's transitions, for baseline diagnostics.
pub fn batch_observations(batch: &EpisodeBatch) -> Vec<Observation> {
    batch
        .trajectories
        .iter()
        .flat_map(|t| t.transitions.iter().map(|tr| tr.observation.clone()))
        .collect()
}

/// Training curve CSV: `epoch,mean_return,mean_discounted_return,kl,surrogate_improvement,wall_seconds`.
pub fn write_curve_csv<W: std::io::Write>(curve: &[EpochStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch",
        "mean_return",
        "mean_discounted_return",
        "kl",
        "surrogate_improvement",
        "wall_seconds",
    ])?;
    for s in curve {
        w.write_record([
            s.epoch.to_string(),
            s.mean_return.to_string(),
            s.mean_discounted_return.to_string(),
            s.kl.to_string(),
            s.surrogate_improvement.to_string(),
            s.wall_seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rng(s: u64) -> SimRng {
        SimRng::seed_from_u64(s)
    }

    fn random_batch(theta: &MlpParams, n: usize, seed: u64) -> SurrogateBatch {
        let mut r = rng(seed);
        let dim = theta.shape().input_dim;
        let k = theta.shape().output_dim;
        let obs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
            .collect();
        let actions = (0..n).map(|_| r.random_range(0..k)).collect();
        let mut adv: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        normalize(&mut adv);
        SurrogateBatch::new(theta, obs, actions, adv, vec![1.0; n]).unwrap()
    }

    #[test]
    fn surrogate_at_old_theta_is_mean_advantage() {
        let theta = MlpParams::init(NetworkShape::single_hidden(3, 4), &mut rng(1));
        let batch = random_batch(&theta, 50, 2);
        assert!(surrogate_loss(&theta, &batch).unwrap().abs() < 1e-12);

        let mut zero = batch.clone();
        zero.advantages.iter_mut().for_each(|a| *a = 0.0);
        let other = MlpParams::init(NetworkShape::single_hidden(3, 4), &mut rng(3));
        assert_eq!(surrogate_loss(&other, &zero).unwrap(), 0.0);
    }

    #[test]
    fn surrogate_two_sample_hand_computation() {
        // linear 1-input, 2-action head: logits = (w0 x + b0, w1 x + b1)
        let shape = NetworkShape::new(1, vec![], 2).unwrap();
        let old = MlpParams::zeros(shape.clone());
        let batch = SurrogateBatch::new(
            &old,
            vec![vec![1.0], vec![-1.0]],
            vec![0, 1],
            vec![1.0, -1.0],
            vec![1.0, 1.0],
        )
        .unwrap();
        let new = MlpParams::from_flat(shape, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        // sample 0: logits (1, 0) -> p0 = e/(e+1); ratio = p0/0.5
        // sample 1: logits (-1, 0) -> p1 = 1/(e^-1+1); ratio = p1/0.5
        let e = std::f64::consts::E;
        let p0 = e / (e + 1.0);
        let p1 = 1.0 / (1.0 / e + 1.0);
        let expected = (p0 / 0.5 * 1.0 + p1 / 0.5 * -1.0) / 2.0;
        assert!((surrogate_loss(&new, &batch).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn fvp_zero_and_linear() {
        let theta = MlpParams::init(NetworkShape::single_hidden(3, 4), &mut rng(4));
        let batch = random_batch(&theta, 40, 5);
        let zero = vec![0.0; theta.len()];
        assert!(fisher_vector_product(&theta, &batch, &zero, 0.1)
            .unwrap()
            .iter()
            .all(|x| *x == 0.0));
        let mut r = rng(6);
        let v: Vec<f64> = (0..theta.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let hv = fisher_vector_product(&theta, &batch, &v, 0.1).unwrap();
        let v3: Vec<f64> = v.iter().map(|x| 3.0 * x).collect();
        let hv3 = fisher_vector_product(&theta, &batch, &v3, 0.1).unwrap();
        for (a, b) in hv.iter().zip(&hv3) {
            assert!((3.0 * a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn cg_small_cases() {
        let g = vec![1.0, -2.0, 3.0];
        let id = |v: &[f64]| Ok(v.to_vec());
        let sol = conjugate_gradient(id, &g, 1).unwrap();
        assert_eq!(sol.x, g);
        let sol = conjugate_gradient(id, &[0.0; 3], 5).unwrap();
        assert_eq!(sol.x, vec![0.0; 3]);
        let bad = |_: &[f64]| Ok(vec![f64::NAN; 3]);
        assert!(conjugate_gradient(bad, &g, 3).is_err());
    }

    #[test]
    fn zero_gradient_batch_leaves_theta() {
        let theta = MlpParams::init(NetworkShape::single_hidden(3, 4), &mut rng(7));
        let mut batch = random_batch(&theta, 30, 8);
        batch.advantages.iter_mut().for_each(|a| *a = 0.0);
        let (next, report) = trust_region_step(&theta, &batch, &TrpoConfig::default()).unwrap();
        assert_eq!(next, theta);
        assert_eq!(report.mean_kl, 0.0);
    }

    #[test]
    fn baseline_zero_targets_unchanged() {
        let phi = MlpParams::zeros(NetworkShape::single_hidden(2, 1));
        let xs = vec![vec![0.1, 0.2]; 10];
        let (next, rep) = fit_baseline(&phi, &xs, &[0.0; 10], &TrpoConfig::default(), &mut rng(1)).unwrap();
        assert_eq!(rep.mse_before, 0.0);
        assert_eq!(rep.mse_after, 0.0);
        assert_eq!(next, phi);
    }

    #[test]
    fn baseline_constant_targets() {
        let phi = MlpParams::init(NetworkShape::single_hidden(2, 1), &mut rng(2));
        let mut r = rng(3);
        let xs: Vec<Vec<f64>> = (0..200).map(|_| vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let c = 37.5;
        let (next, _) = fit_baseline(&phi, &xs, &vec![c; 200], &TrpoConfig::default(), &mut rng(4)).unwrap();
        let mean: f64 = xs.iter().map(|x| next.forward(x).unwrap()[0]).sum::<f64>() / 200.0;
        assert!((mean - c).abs() < 0.05 * c, "{mean}");
    }

    #[test]
    fn output_rescale_round_trip() {
        let mut phi = MlpParams::init(NetworkShape::single_hidden(2, 1), &mut rng(5));
        let x = [0.3, -0.8];
        let before = phi.forward(&x).unwrap()[0];
        rescale_output(&mut phi, 4.0, 2.5);
        let mid = phi.forward(&x).unwrap()[0];
        assert!((mid - (before - 4.0) / 2.5).abs() < 1e-12);
        rescale_output(&mut phi, -4.0 / 2.5, 1.0 / 2.5);
        assert!((phi.forward(&x).unwrap()[0] - before).abs() < 1e-12);
    }
}
