//! Train on fixed-step wildfire simulators, test on the event-driven one.

use std::fmt;
use std::io::Write;

use crate::env::wildfire::{Wildfire, WildfireConfig};
use crate::error::{Error, Result};
use crate::macdec::collect_batch;
use crate::nn::MlpPolicy;
use crate::rng::derive_seed;
use crate::sim::TimeBase;
use crate::trpo::{train, EpochStats, TrainConfig, TrainOutcome};

/// A training simulator: the event-driven one or a fixed-step
/// discretization, optionally with its own fire health.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatorVariant {
    pub time_step: Option<f64>,
    pub fire_health: Option<f64>,
}

impl SimulatorVariant {
    pub fn event_driven() -> Self {
        SimulatorVariant {
            time_step: None,
            fire_health: None,
        }
    }

    pub fn fixed_step(dt: f64) -> Self {
        SimulatorVariant {
            time_step: Some(dt),
            fire_health: None,
        }
    }

    pub fn with_fire_health(self, health: f64) -> Self {
        SimulatorVariant {
            fire_health: Some(health),
            ..self
        }
    }

    /// ED followed by steps of `10^-1, 10^-0.5, ..., 10^1` seconds.
    pub fn reference_set() -> Vec<Self> {
        std::iter::once(Self::event_driven())
            .chain((-2..=2).map(|k| Self::fixed_step(10f64.powf(k as f64 / 2.0))))
            .collect()
    }

    pub fn label(&self) -> String {
        let mut s = match self.time_step {
            None => "ED".to_string(),
            Some(dt) => format!("FS-{dt:.3}").trim_end_matches('0').trim_end_matches('.').to_string(),
        };
        if let Some(h) = self.fire_health {
            s.push_str(&format!("(health={h})"));
        }
        s
    }

    pub fn time_base(&self) -> Result<TimeBase> {
        match self.time_step {
            None => Ok(TimeBase::EventDriven),
            Some(dt) => TimeBase::fixed_step(dt),
        }
    }

    pub fn build(&self, base: &WildfireConfig) -> Result<Wildfire> {
        let cfg = WildfireConfig {
            fire_health: self.fire_health.unwrap_or(base.fire_health),
            ..base.clone()
        };
        Wildfire::with_time_base(cfg, self.time_base()?)
    }
}

impl fmt::Display for SimulatorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub variants: Vec<SimulatorVariant>,
    /// Independently trained policies per variant.
    pub replicates: usize,
    /// Training settings shared by every run; its seed is replaced per replicate.
    pub train: TrainConfig,
    pub wildfire: WildfireConfig,
    pub eval_episodes: usize,
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.replicates == 0 || self.eval_episodes == 0 {
            return Err(Error::Domain(
                "transfer study needs variants, replicates and evaluation episodes".into(),
            ));
        }
        for v in &self.variants {
            v.time_base()?;
        }
        self.wildfire.validate()
    }
}

/// One trained policy scored on the event-driven simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRun {
    pub variant: usize,
    pub replicate: usize,
    pub train_seed: u64,
    /// Discounted return of the last training epoch, on the training simulator.
    pub final_train_return: f64,
    /// Mean discounted return over the evaluation episodes.
    pub test_return: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferRow {
    pub variant: SimulatorVariant,
    pub runs: Vec<TransferRun>,
    pub mean: f64,
    /// Standard error of the mean over replicates.
    pub stderr: f64,
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Replicate `r` trains from the same seed on every variant, and every policy
/// is tested on the same evaluation episodes.
pub fn run_transfer<C>(cfg: &TransferConfig, seed: u64, mut on_run: C) -> Result<Vec<TransferRow>>
where
    C: FnMut(&TransferRun, &TrainOutcome) -> Result<()>,
{
    cfg.validate()?;
    let eval_seed = derive_seed(seed, &[u64::MAX]);
    let test_factory = || Wildfire::new(cfg.wildfire.clone()).expect("validated wildfire config");
    let mut rows = Vec::with_capacity(cfg.variants.len());
    for (vi, variant) in cfg.variants.iter().enumerate() {
        variant.build(&cfg.wildfire)?;
        let factory = || variant.build(&cfg.wildfire).expect("validated variant");
        let mut runs = Vec::with_capacity(cfg.replicates);
        for r in 0..cfg.replicates {
            let train_seed = derive_seed(seed, &[r as u64]);
            let train_cfg = TrainConfig {
                seed: train_seed,
                ..cfg.train.clone()
            };
            let outcome = train(factory, &train_cfg, |_: &EpochStats, _, _| Ok(()))?;
            let policy = MlpPolicy::new(outcome.policy.clone());
            let test = collect_batch(
                test_factory,
                &policy,
                cfg.eval_episodes,
                eval_seed,
                0,
                cfg.train.horizon,
                cfg.train.mgae.gamma,
            )?;
            let run = TransferRun {
                variant: vi,
                replicate: r,
                train_seed,
                final_train_return: outcome.curve.last().map_or(0.0, |s| s.mean_discounted_return),
                test_return: test.mean_discounted_return(),
            };
            on_run(&run, &outcome)?;
            runs.push(run);
        }
        let returns: Vec<f64> = runs.iter().map(|r| r.test_return).collect();
        let (mean, stderr) = mean_and_stderr(&returns);
        rows.push(TransferRow {
            variant: variant.clone(),
            runs,
            mean,
            stderr,
        });
    }
    Ok(rows)
}

/// Writes `simulator,time_step,fire_health,replicates,mean_test_return,stderr`.
pub fn write_transfer_csv<W: Write>(rows: &[TransferRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "simulator",
        "time_step",
        "fire_health",
        "replicates",
        "mean_test_return",
        "stderr",
    ])?;
    for row in rows {
        w.write_record([
            row.variant.label(),
            row.variant.time_step.map_or(String::new(), |d| d.to_string()),
            row.variant.fire_health.map_or(String::new(), |h| h.to_string()),
            row.runs.len().to_string(),
            row.mean.to_string(),
            row.stderr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one line per trained policy.
pub fn write_runs_csv<W: Write>(rows: &[TransferRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["simulator", "replicate", "train_seed", "final_train_return", "test_return"])?;
    for row in rows {
        for run in &row.runs {
            w.write_record([
                row.variant.label(),
                run.replicate.to_string(),
                run.train_seed.to_string(),
                run.final_train_return.to_string(),
                run.test_return.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
