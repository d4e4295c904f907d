//! Subcommand execution and run-directory outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use eventrl_core::env::bus::{
    mean_return, optimize_thresholds, write_arrivals_csv, BusCorridor, NoHoldingPolicy, ThresholdPolicy,
    ThresholdPolicyParams,
};
use eventrl_core::env::wildfire::{write_events_csv, ScriptedPolicy};
use eventrl_core::macdec::{collect_batch, run_episode, UniformPolicy};
use eventrl_core::race::{plot_script, run_study, write_fits_csv, write_points_csv, EventTimeDistribution};
use eventrl_core::rng::derive_seed;
use eventrl_core::transfer::{run_transfer, write_runs_csv, write_transfer_csv, TransferConfig};
use eventrl_core::trpo::{train, write_curve_csv, EpochStats, TrainConfig};
use eventrl_core::{Checkpoint, EpisodeBatch, Environment, MlpParams, MlpPolicy, Policy, SimRng};
use rand::SeedableRng;

use crate::config::{load_config, EnvironmentKind, ExperimentConfig, ExperimentKind, PolicyKind};

/// Command-line inputs shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Loads the config, applies command-line overrides, writes the manifest and
/// runs the experiment. Returns the run directory.
pub fn execute(kind: ExperimentKind, inv: &Invocation) -> Result<PathBuf> {
    let mut cfg = match &inv.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(k) = cfg.experiment.kind {
        ensure!(k == kind, "config is for `{k}` but the subcommand is `{kind}`");
    }
    cfg.experiment.kind = Some(kind);
    if let Some(seed) = inv.seed {
        cfg.experiment.seed = Some(seed);
    }
    let seed = cfg.seed()?;
    let out = match (&inv.out, &cfg.experiment.out, &inv.config) {
        (Some(o), _, _) => o.clone(),
        (None, Some(o), Some(path)) if o.is_relative() => path.parent().unwrap_or(Path::new(".")).join(o),
        (None, Some(o), _) => o.clone(),
        (None, None, _) => PathBuf::from("runs").join(format!("{kind}-{seed}")),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_manifest(&cfg, &out)?;

    let started = Instant::now();
    match kind {
        ExperimentKind::Train => run_train(&cfg, seed, &out)?,
        ExperimentKind::Eval => run_eval(&cfg, seed, &out)?,
        ExperimentKind::BaselineOptimize => run_baseline_optimize(&cfg, seed, &out)?,
        ExperimentKind::RaceStudy => run_race_study(&cfg, seed, &out)?,
        ExperimentKind::TransferStudy => run_transfer_study(&cfg, seed, &out)?,
    }
    log(format!("{kind} finished in {:.1} s, outputs in {}", started.elapsed().as_secs_f64(), out.display()));
    Ok(out)
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[eventrl] {}", msg.as_ref());
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_manifest(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let resolved = cfg.resolved()?;
    let kind = resolved.experiment.kind.map_or("train", |k| k.as_str());
    let mut w = create(&out.join("manifest.toml"))?;
    writeln!(w, "# eventrl {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(w, "# rerun: eventrl {kind} --config manifest.toml --out <dir>\n")?;
    w.write_all(resolved.to_toml()?.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn train_config(cfg: &ExperimentConfig, seed: u64, horizon: f64) -> Result<TrainConfig> {
    Ok(TrainConfig {
        trpo: cfg.trpo_config()?,
        mgae: cfg.mgae_config()?,
        epochs: cfg.trpo.epochs,
        horizon,
        seed,
        hidden_sizes: cfg.trpo.hidden_sizes.clone(),
        record_wall_time: false,
    })
}

fn horizon(cfg: &ExperimentConfig) -> f64 {
    match cfg.environment() {
        EnvironmentKind::Bus => cfg.bus.horizon,
        EnvironmentKind::Wildfire => cfg.wildfire.horizon,
    }
}

fn run_train(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let train_cfg = train_config(cfg, seed, horizon(cfg))?;
    let every = cfg.trpo.checkpoint_every;
    let ckpt_dir = out.join("checkpoints");
    if every > 0 {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let started = Instant::now();
    let on_epoch = |s: &EpochStats, policy: &MlpParams, _: &MlpParams| -> eventrl_core::Result<()> {
        log(format!(
            "epoch {:>4}  return {:>12.3}  discounted {:>12.3}  kl {:.5}  ({:.1} s)",
            s.epoch + 1,
            s.mean_return,
            s.mean_discounted_return,
            s.kl,
            started.elapsed().as_secs_f64()
        ));
        if every > 0 && (s.epoch + 1).is_multiple_of(every) {
            Checkpoint {
                seed,
                epoch: s.epoch as u64 + 1,
                params: policy.clone(),
            }
            .save(&ckpt_dir.join(format!("policy-{:05}.ckpt", s.epoch + 1)))?;
        }
        Ok(())
    };
    let outcome = match cfg.environment() {
        EnvironmentKind::Bus => {
            let bus = cfg.bus.to_config()?;
            train(|| BusCorridor::new(bus.clone()).expect("validated bus config"), &train_cfg, on_epoch)?
        }
        EnvironmentKind::Wildfire => {
            let wf = cfg.wildfire.to_config()?;
            let variant = cfg.wildfire.simulator();
            variant.build(&wf)?;
            train(|| variant.build(&wf).expect("validated wildfire config"), &train_cfg, on_epoch)?
        }
    };
    write_curve_csv(&outcome.curve, create(&out.join("curve.csv"))?)?;
    let epochs = train_cfg.epochs as u64;
    for (name, params) in [("policy.ckpt", outcome.policy), ("baseline.ckpt", outcome.baseline)] {
        Checkpoint { seed, epoch: epochs, params }.save(&out.join(name))?;
    }
    Ok(())
}

fn load_policy(cfg: &ExperimentConfig, env: &dyn Environment) -> Result<MlpPolicy> {
    let path = cfg.eval.checkpoint.as_ref().context("[eval] checkpoint is required")?;
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let shape = ck.params.shape();
    ensure!(
        shape.input_dim == env.observation_dim() && shape.output_dim == env.n_actions(),
        "checkpoint {} maps {} inputs to {} actions, the environment needs {} and {}",
        path.display(),
        shape.input_dim,
        shape.output_dim,
        env.observation_dim(),
        env.n_actions()
    );
    Ok(MlpPolicy {
        params: ck.params,
        greedy: cfg.eval.greedy,
    })
}

fn eval_policy(cfg: &ExperimentConfig, env: &dyn Environment) -> Result<Box<dyn Policy + Sync>> {
    let bus = cfg.environment() == EnvironmentKind::Bus;
    Ok(match cfg.eval.policy {
        PolicyKind::Checkpoint => Box::new(load_policy(cfg, env)?),
        PolicyKind::Uniform => Box::new(UniformPolicy {
            n_actions: env.n_actions(),
        }),
        PolicyKind::NoHolding if bus => Box::new(NoHoldingPolicy),
        PolicyKind::Thresholds if bus => {
            let [t1, t2, t3] = cfg.eval.thresholds.context("[eval] thresholds are required")?;
            Box::new(ThresholdPolicy::new(
                ThresholdPolicyParams::new(t1, t2, t3)?,
                cfg.bus.planned_headway,
            ))
        }
        PolicyKind::Scripted if !bus => Box::new(ScriptedPolicy),
        other => bail!("policy {other:?} is not available for this environment"),
    })
}

/// Episode `0` of a batch, replayed on its own environment so its event log
/// can be written.
fn first_episode<E: Environment>(env: &mut E, policy: &(dyn Policy + Sync), cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let mut rng = SimRng::seed_from_u64(derive_seed(seed, &[0, 0]));
    run_episode(env, policy, &mut rng, horizon(cfg), cfg.mgae_config()?.gamma)?;
    Ok(())
}

fn write_episodes_csv(batch: &EpisodeBatch, out: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(out)?);
    w.write_record([
        "episode",
        "seed",
        "sim_duration",
        "terminal",
        "team_return",
        "team_discounted_return",
        "decisions",
    ])?;
    for e in &batch.episodes {
        w.write_record([
            e.index.to_string(),
            e.seed.to_string(),
            e.sim_duration.to_string(),
            e.terminal.to_string(),
            e.team_return.to_string(),
            e.team_discounted_return.to_string(),
            e.decisions.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_summary_csv(cfg: &ExperimentConfig, batch: &EpisodeBatch, out: &Path) -> Result<()> {
    let n = batch.episodes.len() as f64;
    let mean = batch.mean_return();
    let var = batch.episodes.iter().map(|e| (e.team_return - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut w = csv::Writer::from_writer(create(out)?);
    w.write_record(["policy", "episodes", "mean_return", "stderr_return", "mean_discounted_return"])?;
    w.write_record([
        cfg.eval.policy.as_str().to_string(),
        batch.episodes.len().to_string(),
        mean.to_string(),
        (var / n).sqrt().to_string(),
        batch.mean_discounted_return().to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn run_eval(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let episodes = cfg.eval.episodes;
    let gamma = cfg.mgae_config()?.gamma;
    let h = horizon(cfg);
    let batch = match cfg.environment() {
        EnvironmentKind::Bus => {
            let bus = cfg.bus.to_config()?;
            let mut env = BusCorridor::new(bus.clone())?;
            let policy = eval_policy(cfg, &env)?;
            let factory = || BusCorridor::new(bus.clone()).expect("validated bus config");
            let batch = collect_batch(factory, policy.as_ref(), episodes, seed, 0, h, gamma)?;
            first_episode(&mut env, policy.as_ref(), cfg, seed)?;
            write_arrivals_csv(env.arrivals(), create(&out.join("arrivals.csv"))?)?;
            batch
        }
        EnvironmentKind::Wildfire => {
            let wf = cfg.wildfire.to_config()?;
            let variant = cfg.wildfire.simulator();
            let mut env = variant.build(&wf)?;
            let policy = eval_policy(cfg, &env)?;
            let factory = || variant.build(&wf).expect("validated wildfire config");
            let batch = collect_batch(factory, policy.as_ref(), episodes, seed, 0, h, gamma)?;
            first_episode(&mut env, policy.as_ref(), cfg, seed)?;
            write_events_csv(env.events(), create(&out.join("events.csv"))?)?;
            batch
        }
    };
    log(format!(
        "{} episodes: mean return {:.3}, mean discounted return {:.3}",
        episodes,
        batch.mean_return(),
        batch.mean_discounted_return()
    ));
    write_episodes_csv(&batch, &out.join("episodes.csv"))?;
    write_summary_csv(cfg, &batch, &out.join("summary.csv"))?;
    batch.write_csv(create(&out.join("trajectories.csv"))?)?;
    Ok(())
}

fn run_baseline_optimize(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    ensure!(
        cfg.environment() == EnvironmentKind::Bus,
        "baseline-optimize searches bus holding thresholds; set environment = \"bus\""
    );
    let bus = cfg.bus.to_config()?;
    let (params, result) = optimize_thresholds(&bus, &cfg.de.search(), seed)?;
    let [t1, t2, t3] = params.as_array();
    log(format!(
        "best thresholds ({t1:.3}, {t2:.3}, {t3:.3}) with search return {:.3} after {} evaluations",
        result.best_value, result.evaluations
    ));
    let eval_seed = derive_seed(seed, &[1]);
    let episodes = cfg.eval.episodes;
    let threshold_return = mean_return(&bus, &ThresholdPolicy::new(params, bus.planned_headway), episodes, eval_seed)?;
    let nh_return = mean_return(&bus, &NoHoldingPolicy, episodes, eval_seed)?;

    let mut w = csv::Writer::from_writer(create(&out.join("thresholds.csv"))?);
    w.write_record(["policy", "T1", "T2", "T3", "search_return", "evaluations", "eval_episodes", "eval_return"])?;
    w.write_record([
        "thresholds".to_string(),
        t1.to_string(),
        t2.to_string(),
        t3.to_string(),
        result.best_value.to_string(),
        result.evaluations.to_string(),
        episodes.to_string(),
        threshold_return.to_string(),
    ])?;
    w.write_record([
        "no-holding".to_string(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        String::new(),
        episodes.to_string(),
        nh_return.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

fn run_race_study(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    let dists: Vec<EventTimeDistribution> = cfg.race.distributions.iter().map(|&d| d.into()).collect();
    let result = run_study(&dists, &cfg.race.study_config(), seed)?;
    for (d, fit) in &result.fits {
        log(format!("{}: beta = {:.3} +/- {:.3}", d.name(), fit.beta, fit.beta_stderr));
    }
    write_points_csv(&result.points, create(&out.join("race_points.csv"))?)?;
    write_fits_csv(&result.fits, create(&out.join("race_fits.csv"))?)?;
    fs::write(out.join("plot_race.py"), plot_script("race_points.csv", "race_fits.csv"))?;
    Ok(())
}

const TRANSFER_PLOT: &str = r#"import csv
import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("transfer.csv")))
labels = [r["simulator"] for r in rows]
means = [float(r["mean_test_return"]) for r in rows]
errs = [float(r["stderr"]) for r in rows]
fig, ax = plt.subplots()
ax.bar(range(len(rows)), means, yerr=errs, capsize=4)
ax.set_xticks(range(len(rows)))
ax.set_xticklabels(labels, rotation=30, ha="right")
ax.set_ylabel("discounted return on the event-driven simulator")
fig.tight_layout()
fig.savefig("transfer.png", dpi=150)
"#;

fn run_transfer_study(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<()> {
    ensure!(
        cfg.environment() == EnvironmentKind::Wildfire,
        "transfer-study trains wildfire policies; set environment = \"wildfire\""
    );
    let wildfire = cfg.wildfire.to_config()?;
    let tc = TransferConfig {
        variants: cfg.transfer.variants.iter().map(|&v| v.into()).collect(),
        replicates: cfg.transfer.replicates,
        train: train_config(cfg, seed, wildfire.horizon)?,
        wildfire,
        eval_episodes: cfg.transfer.eval_episodes,
    };
    let policies = out.join("policies");
    fs::create_dir_all(&policies)?;
    let started = Instant::now();
    let rows = run_transfer(&tc, seed, |run, outcome| {
        let label = tc.variants[run.variant].label();
        log(format!(
            "{label} replicate {}: train {:.3}, test {:.3} ({:.1} s)",
            run.replicate,
            run.final_train_return,
            run.test_return,
            started.elapsed().as_secs_f64()
        ));
        Checkpoint {
            seed: run.train_seed,
            epoch: tc.train.epochs as u64,
            params: outcome.policy.clone(),
        }
        .save(&policies.join(format!("variant{}-rep{}.ckpt", run.variant, run.replicate)))
    })?;
    write_transfer_csv(&rows, create(&out.join("transfer.csv"))?)?;
    write_runs_csv(&rows, create(&out.join("transfer_runs.csv"))?)?;
    fs::write(out.join("plot_transfer.py"), TRANSFER_PLOT)?;
    Ok(())
}
