//! Experiment configuration files.
//!
//! A config is TOML with one section per subsystem. Every section is
//! optional and starts from the published defaults; unknown keys are
//! rejected. `[experiment] seed` must be set here or on the command line.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use eventrl_core::de::DeConfig;
use eventrl_core::env::bus::{BusCorridorConfig, StopParams, ThresholdSearch};
use eventrl_core::env::wildfire::WildfireConfig;
use eventrl_core::race::{EventTimeDistribution, RaceStudyConfig};
use eventrl_core::transfer::SimulatorVariant;
use eventrl_core::trpo::TrpoConfig;
use eventrl_core::MGaeConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Train,
    Eval,
    BaselineOptimize,
    RaceStudy,
    TransferStudy,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Train => "train",
            ExperimentKind::Eval => "eval",
            ExperimentKind::BaselineOptimize => "baseline-optimize",
            ExperimentKind::RaceStudy => "race-study",
            ExperimentKind::TransferStudy => "transfer-study",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvironmentKind {
    Bus,
    Wildfire,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    /// Defaults to wildfire for transfer studies and to the bus corridor otherwise.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub environment: Option<EnvironmentKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory; `--out` takes precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BusSection {
    pub n_buses: usize,
    pub capacity: u32,
    pub travel_times: Vec<f64>,
    pub alight_time: f64,
    pub board_time: f64,
    pub planned_headway: f64,
    pub hold_unit: f64,
    pub alight_fractions: Vec<f64>,
    pub arrival_rates: Vec<f64>,
    pub horizon: f64,
}

impl Default for BusSection {
    fn default() -> Self {
        let d = BusCorridorConfig::default();
        BusSection {
            n_buses: d.n_buses,
            capacity: d.capacity,
            travel_times: d.travel_times,
            alight_time: d.alight_time,
            board_time: d.board_time,
            planned_headway: d.planned_headway,
            hold_unit: d.hold_unit,
            alight_fractions: d.stops.iter().map(|s| s.alight_fraction).collect(),
            arrival_rates: d.stops.iter().map(|s| s.arrival_rate).collect(),
            horizon: d.horizon,
        }
    }
}

impl BusSection {
    pub fn to_config(&self) -> Result<BusCorridorConfig> {
        ensure!(
            self.alight_fractions.len() == self.arrival_rates.len(),
            "[bus] alight_fractions and arrival_rates must have one entry per stop"
        );
        let cfg = BusCorridorConfig {
            n_buses: self.n_buses,
            capacity: self.capacity,
            travel_times: self.travel_times.clone(),
            alight_time: self.alight_time,
            board_time: self.board_time,
            planned_headway: self.planned_headway,
            hold_unit: self.hold_unit,
            stops: self
                .alight_fractions
                .iter()
                .zip(&self.arrival_rates)
                .map(|(&alight_fraction, &arrival_rate)| StopParams {
                    alight_fraction,
                    arrival_rate,
                })
                .collect(),
            horizon: self.horizon,
        };
        cfg.validate().context("[bus]")?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WildfireSection {
    pub n_aircraft: usize,
    pub n_fires: usize,
    pub speed: f64,
    pub hold_mean: f64,
    pub hold_std: f64,
    pub min_hold: f64,
    pub min_flight: f64,
    pub fire_health: f64,
    pub horizon: f64,
    pub extinguish_reward: f64,
    pub penalty: f64,
    pub cluster_radius: f64,
    pub fire_radius: f64,
    pub spawn_half_width: f64,
    /// Fixed simulation step for train/eval; event-driven when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_step: Option<f64>,
}

impl Default for WildfireSection {
    fn default() -> Self {
        let d = WildfireConfig::default();
        WildfireSection {
            n_aircraft: d.n_aircraft,
            n_fires: d.n_fires,
            speed: d.speed,
            hold_mean: d.hold_mean,
            hold_std: d.hold_std,
            min_hold: d.min_hold,
            min_flight: d.min_flight,
            fire_health: d.fire_health,
            horizon: d.horizon,
            extinguish_reward: d.extinguish_reward,
            penalty: d.penalty,
            cluster_radius: d.cluster_radius,
            fire_radius: d.fire_radius,
            spawn_half_width: d.spawn_half_width,
            time_step: None,
        }
    }
}

impl WildfireSection {
    pub fn to_config(&self) -> Result<WildfireConfig> {
        let cfg = WildfireConfig {
            n_aircraft: self.n_aircraft,
            n_fires: self.n_fires,
            speed: self.speed,
            hold_mean: self.hold_mean,
            hold_std: self.hold_std,
            min_hold: self.min_hold,
            min_flight: self.min_flight,
            fire_health: self.fire_health,
            horizon: self.horizon,
            extinguish_reward: self.extinguish_reward,
            penalty: self.penalty,
            cluster_radius: self.cluster_radius,
            fire_radius: self.fire_radius,
            spawn_half_width: self.spawn_half_width,
        };
        cfg.validate().context("[wildfire]")?;
        Ok(cfg)
    }

    pub fn simulator(&self) -> SimulatorVariant {
        match self.time_step {
            Some(dt) => SimulatorVariant::fixed_step(dt),
            None => SimulatorVariant::event_driven(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrpoSection {
    pub max_kl: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    pub baseline_epochs: usize,
    pub baseline_learning_rate: f64,
    pub baseline_minibatch: usize,
    /// 540 for the bus corridor and 600 for wildfire when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_episodes: Option<usize>,
    pub epochs: usize,
    pub hidden_sizes: Vec<usize>,
    /// Write a policy checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrpoSection {
    fn default() -> Self {
        let d = TrpoConfig::default();
        TrpoSection {
            max_kl: d.max_kl,
            cg_iters: d.cg_iters,
            cg_damping: d.cg_damping,
            backtrack_ratio: d.backtrack_ratio,
            max_backtracks: d.max_backtracks,
            baseline_epochs: d.baseline_epochs,
            baseline_learning_rate: d.baseline_learning_rate,
            baseline_minibatch: d.baseline_minibatch,
            batch_episodes: None,
            epochs: 300,
            hidden_sizes: vec![32],
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MgaeSection {
    /// Continuous discount rate, 1/s. Defaults per environment.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistributionSpec {
    Exponential { rate: f64 },
    ChiSquared { dof: f64 },
    Gamma { shape: f64, scale: f64 },
}

impl From<DistributionSpec> for EventTimeDistribution {
    fn from(d: DistributionSpec) -> Self {
        match d {
            DistributionSpec::Exponential { rate } => EventTimeDistribution::Exponential { rate },
            DistributionSpec::ChiSquared { dof } => EventTimeDistribution::ChiSquared { dof },
            DistributionSpec::Gamma { shape, scale } => EventTimeDistribution::Gamma { shape, scale },
        }
    }
}

impl From<EventTimeDistribution> for DistributionSpec {
    fn from(d: EventTimeDistribution) -> Self {
        match d {
            EventTimeDistribution::Exponential { rate } => DistributionSpec::Exponential { rate },
            EventTimeDistribution::ChiSquared { dof } => DistributionSpec::ChiSquared { dof },
            EventTimeDistribution::Gamma { shape, scale } => DistributionSpec::Gamma { shape, scale },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaceSection {
    pub trials: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub delta: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub distributions: Vec<DistributionSpec>,
}

impl Default for RaceSection {
    fn default() -> Self {
        let d = RaceStudyConfig::default();
        RaceSection {
            trials: d.trials,
            n_min: d.n_min,
            n_max: d.n_max,
            delta: d.delta,
            rel_tol: d.rel_tol,
            max_iter: d.max_iter,
            distributions: EventTimeDistribution::reference_set()
                .into_iter()
                .map(Into::into)
                .collect(),
        }
    }
}

impl RaceSection {
    pub fn study_config(&self) -> RaceStudyConfig {
        RaceStudyConfig {
            trials: self.trials,
            n_min: self.n_min,
            n_max: self.n_max,
            delta: self.delta,
            rel_tol: self.rel_tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantSpec {
    /// Fixed step in seconds; event-driven when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fire_health: Option<f64>,
}

impl From<VariantSpec> for SimulatorVariant {
    fn from(v: VariantSpec) -> Self {
        SimulatorVariant {
            time_step: v.time_step,
            fire_health: v.fire_health,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub replicates: usize,
    pub eval_episodes: usize,
    pub variants: Vec<VariantSpec>,
}

impl Default for TransferSection {
    fn default() -> Self {
        let mut variants: Vec<VariantSpec> = SimulatorVariant::reference_set()
            .into_iter()
            .map(|v| VariantSpec {
                time_step: v.time_step,
                fire_health: v.fire_health,
            })
            .collect();
        variants.push(VariantSpec {
            time_step: Some(1.0),
            fire_health: Some(2.9999),
        });
        TransferSection {
            replicates: 5,
            eval_episodes: 200,
            variants,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// An MLP policy checkpoint.
    Checkpoint,
    #[default]
    NoHolding,
    Thresholds,
    Scripted,
    Uniform,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Checkpoint => "checkpoint",
            PolicyKind::NoHolding => "no-holding",
            PolicyKind::Thresholds => "thresholds",
            PolicyKind::Scripted => "scripted",
            PolicyKind::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub policy: PolicyKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// `[T1, T2, T3]` in minutes for the threshold policy.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<[f64; 3]>,
    /// Act on the most probable action instead of sampling.
    pub greedy: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 100,
            policy: PolicyKind::default(),
            checkpoint: None,
            thresholds: None,
            greedy: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeSection {
    pub population: usize,
    pub generations: usize,
    pub mutation: [f64; 2],
    pub crossover: f64,
    /// Episodes averaged per candidate.
    pub episodes: usize,
    /// Upper bound of every threshold, minutes.
    pub max_threshold: f64,
}

impl Default for DeSection {
    fn default() -> Self {
        let d = ThresholdSearch::default();
        DeSection {
            population: d.de.population,
            generations: d.de.generations,
            mutation: [d.de.mutation.0, d.de.mutation.1],
            crossover: d.de.crossover,
            episodes: d.episodes,
            max_threshold: d.max_threshold,
        }
    }
}

impl DeSection {
    pub fn search(&self) -> ThresholdSearch {
        ThresholdSearch {
            de: DeConfig {
                population: self.population,
                generations: self.generations,
                mutation: (self.mutation[0], self.mutation[1]),
                crossover: self.crossover,
            },
            episodes: self.episodes,
            max_threshold: self.max_threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub bus: BusSection,
    pub wildfire: WildfireSection,
    pub trpo: TrpoSection,
    pub mgae: MgaeSection,
    pub race: RaceSection,
    pub transfer: TransferSection,
    pub eval: EvalSection,
    pub de: DeSection,
}

/// Parses a config without touching the filesystem. Syntax errors, unknown
/// keys and type mismatches report the offending line.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
    cfg.check()?;
    Ok(cfg)
}

/// Reads and parses a config file, resolving the checkpoint path against
/// the file's directory and checking that it exists.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = parse_config(&text).with_context(|| format!("in {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    if let Some(ck) = &cfg.eval.checkpoint {
        if ck.is_relative() {
            cfg.eval.checkpoint = Some(base.join(ck));
        }
    }
    cfg.check_paths()?;
    Ok(cfg)
}

impl ExperimentConfig {
    fn check(&self) -> Result<()> {
        self.bus.to_config()?;
        self.wildfire.to_config()?;
        self.mgae_config()?;
        self.trpo_config()?.validate().context("[trpo]")?;
        self.race.study_config().validate().context("[race]")?;
        ensure!(!self.race.distributions.is_empty(), "[race] distributions must not be empty");
        ensure!(self.transfer.replicates > 0, "[transfer] replicates must be >= 1");
        ensure!(self.transfer.eval_episodes > 0, "[transfer] eval_episodes must be >= 1");
        ensure!(!self.transfer.variants.is_empty(), "[transfer] variants must not be empty");
        ensure!(self.eval.episodes > 0, "[eval] episodes must be >= 1");
        if self.eval.policy == PolicyKind::Thresholds && self.eval.thresholds.is_none() {
            bail!("[eval] policy = \"thresholds\" needs a thresholds = [T1, T2, T3] key");
        }
        if self.eval.policy == PolicyKind::Checkpoint && self.eval.checkpoint.is_none() {
            bail!("[eval] policy = \"checkpoint\" needs a checkpoint = \"path\" key");
        }
        Ok(())
    }

    /// Checks that every referenced file exists.
    pub fn check_paths(&self) -> Result<()> {
        if let Some(ck) = &self.eval.checkpoint {
            ensure!(ck.is_file(), "[eval] checkpoint {} does not exist", ck.display());
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.experiment
            .seed
            .context("missing required key `seed` in [experiment] (or pass --seed)")
    }

    pub fn environment(&self) -> EnvironmentKind {
        self.experiment.environment.unwrap_or(match self.experiment.kind {
            Some(ExperimentKind::TransferStudy) => EnvironmentKind::Wildfire,
            _ => EnvironmentKind::Bus,
        })
    }

    pub fn batch_episodes(&self) -> usize {
        self.trpo.batch_episodes.unwrap_or(match self.environment() {
            EnvironmentKind::Bus => 540,
            EnvironmentKind::Wildfire => 600,
        })
    }

    pub fn mgae_config(&self) -> Result<MGaeConfig> {
        let (gamma, lambda) = match self.environment() {
            EnvironmentKind::Bus => (1e-5, 2.0),
            EnvironmentKind::Wildfire => (0.02, 1.0),
        };
        MGaeConfig::new(self.mgae.gamma.unwrap_or(gamma), self.mgae.lambda.unwrap_or(lambda))
            .context("[mgae]")
    }

    pub fn trpo_config(&self) -> Result<TrpoConfig> {
        Ok(TrpoConfig {
            max_kl: self.trpo.max_kl,
            cg_iters: self.trpo.cg_iters,
            cg_damping: self.trpo.cg_damping,
            backtrack_ratio: self.trpo.backtrack_ratio,
            max_backtracks: self.trpo.max_backtracks,
            baseline_epochs: self.trpo.baseline_epochs,
            baseline_learning_rate: self.trpo.baseline_learning_rate,
            baseline_minibatch: self.trpo.baseline_minibatch,
            batch_episodes: self.batch_episodes(),
        })
    }

    /// Fills environment-dependent defaults so the echo is self-contained.
    pub fn resolved(&self) -> Result<ExperimentConfig> {
        let mut cfg = self.clone();
        let mgae = self.mgae_config()?;
        cfg.mgae = MgaeSection {
            gamma: Some(mgae.gamma),
            lambda: Some(mgae.lambda),
        };
        cfg.trpo.batch_episodes = Some(self.batch_episodes());
        cfg.experiment.environment = Some(self.environment());
        cfg.experiment.out = None;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing config")
    }
}
