//! Macro-action episodes.
//!
//! Environments advance from event to event and report which agents have
//! just finished a macro-action. The episode runner settles each finishing
//! agent's accumulated team reward into a [`Transition`], asks the shared
//! policy for the next macro-action and hands it back to the environment.

mod episode;
mod reward;

pub use episode::{collect_batch, run_episode, EpisodeRecord};
pub use reward::RewardAccumulator;

use std::io::Write;

use crate::error::{Error, Result};
use crate::rng::SimRng;

/// Fixed-length feature vector an agent sees at a decision instant.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite observation entry {v}")));
        }
        Ok(Observation(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub observation: Observation,
    pub action: usize,
    /// Seconds the macro-action was active.
    pub duration: f64,
    /// Continuously discounted reward collected during the macro-action.
    pub reward: f64,
    pub terminal: bool,
}

/// One agent's sequence of completed macro-actions within an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub episode: usize,
    pub agent: usize,
    /// Simulation time of the agent's first decision.
    pub start_time: f64,
    pub transitions: Vec<Transition>,
    /// Observation to bootstrap from when the episode was truncated; `None` after a terminal.
    pub final_observation: Option<Observation>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn is_terminal(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.terminal)
    }

    /// Cumulative start times `T_k` of every macro-action, plus the end time of the last one.
    pub fn cumulative_times(&self) -> Vec<f64> {
        let mut t = 0.0;
        let mut out = Vec::with_capacity(self.transitions.len() + 1);
        out.push(0.0);
        for tr in &self.transitions {
            t += tr.duration;
            out.push(t);
        }
        out
    }

    pub fn total_duration(&self) -> f64 {
        self.transitions.iter().map(|t| t.duration).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.transitions.is_empty() {
            return Err(Error::Contract(format!(
                "trajectory of agent {} is empty",
                self.agent
            )));
        }
        let last = self.transitions.len() - 1;
        for (k, t) in self.transitions.iter().enumerate() {
            if !(t.duration.is_finite() && t.duration > 0.0) {
                return Err(Error::Contract(format!(
                    "transition {k} has non-positive duration {}",
                    t.duration
                )));
            }
            if !t.reward.is_finite() {
                return Err(Error::Contract(format!("transition {k} has non-finite reward")));
            }
            if t.terminal && k != last {
                return Err(Error::Contract(format!("terminal transition {k} is not last")));
            }
        }
        if self.is_terminal() == self.final_observation.is_some() {
            return Err(Error::Contract(
                "final observation must be present exactly for truncated trajectories".into(),
            ));
        }
        Ok(())
    }
}

/// Bookkeeping for one simulated episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSummary {
    pub index: usize,
    pub seed: u64,
    /// Simulated seconds until termination or truncation.
    pub sim_duration: f64,
    pub terminal: bool,
    /// Undiscounted sum of all team rewards.
    pub team_return: f64,
    /// Team rewards discounted from the episode start, `sum exp(-gamma t) r`.
    pub team_discounted_return: f64,
    pub decisions: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeBatch {
    pub trajectories: Vec<Trajectory>,
    pub episodes: Vec<EpisodeSummary>,
}

impl EpisodeBatch {
    pub fn push(&mut self, record: EpisodeRecord) {
        self.trajectories.extend(record.trajectories);
        self.episodes.push(record.summary);
    }

    pub fn mean_return(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.team_return))
    }

    pub fn mean_discounted_return(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.team_discounted_return))
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    /// Writes `episode,agent,k,T,dt,action,reward` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_trajectories_csv(&self.trajectories, out)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (n, s) = it.fold((0usize, 0.0), |(n, s), x| (n + 1, s + x));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn write_trajectories_csv<W: Write>(trajectories: &[Trajectory], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["episode", "agent", "k", "T", "dt", "action", "reward"])?;
    for traj in trajectories {
        let times = traj.cumulative_times();
        for (k, tr) in traj.transitions.iter().enumerate() {
            w.write_record([
                traj.episode.to_string(),
                traj.agent.to_string(),
                k.to_string(),
                times[k].to_string(),
                tr.duration.to_string(),
                tr.action.to_string(),
                tr.reward.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A reward shared by the whole team.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TeamReward {
    /// Accrued at the current simulation time.
    Impulse(f64),
    /// Constant rate over an absolute time interval that ends no later than now.
    Rate { start: f64, end: f64, rate: f64 },
}

/// Result of processing a single event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Step {
    pub rewards: Vec<TeamReward>,
    /// Agents whose macro-action terminated on this event, in ascending order.
    pub deciding: Vec<usize>,
}

/// An event-driven multi-agent environment with macro-actions.
pub trait Environment {
    fn n_agents(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn observation_dim(&self) -> usize;

    /// Starts a new episode and returns the agents that decide at time zero.
    fn reset(&mut self, rng: &mut SimRng) -> Result<Vec<usize>>;

    fn now(&self) -> f64;

    /// Time of the next pending event, `None` when the queue is empty.
    fn next_event_time(&mut self) -> Option<f64>;

    /// Pops and processes one event.
    fn advance(&mut self, rng: &mut SimRng) -> Result<Step>;

    fn observe(&self, agent: usize) -> Observation;

    /// Starts `action` for an agent at a decision instant; returns team rewards
    /// accrued at that instant.
    fn apply_decision(
        &mut self,
        agent: usize,
        action: usize,
        rng: &mut SimRng,
    ) -> Result<Vec<TeamReward>>;

    fn is_terminal(&self) -> bool;
}

/// Maps an agent's observation to a macro-action index.
pub trait Policy {
    fn act(&self, agent: usize, observation: &Observation, rng: &mut SimRng) -> usize;
}

impl<F> Policy for F
where
    F: Fn(usize, &Observation, &mut SimRng) -> usize,
{
    fn act(&self, agent: usize, observation: &Observation, rng: &mut SimRng) -> usize {
        self(agent, observation, rng)
    }
}

/// Uniformly random macro-action.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub n_actions: usize,
}

impl Policy for UniformPolicy {
    fn act(&self, _agent: usize, _observation: &Observation, rng: &mut SimRng) -> usize {
        use rand::Rng;
        rng.random_range(0..self.n_actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(dt: f64, terminal: bool) -> Transition {
        Transition {
            observation: Observation(vec![0.0]),
            action: 0,
            duration: dt,
            reward: 1.0,
            terminal,
        }
    }

    #[test]
    fn trajectory_invariants() {
        let mut traj = Trajectory {
            episode: 0,
            agent: 0,
            start_time: 0.0,
            transitions: vec![tr(1.0, false), tr(2.0, true)],
            final_observation: None,
        };
        traj.validate().unwrap();
        assert_eq!(traj.cumulative_times(), vec![0.0, 1.0, 3.0]);

        traj.transitions[0].terminal = true;
        assert!(traj.validate().is_err());
        traj.transitions[0].terminal = false;
        traj.transitions[1].duration = 0.0;
        assert!(traj.validate().is_err());
        traj.transitions[1].duration = 1.0;
        traj.transitions[1].terminal = false;
        assert!(traj.validate().is_err(), "truncated needs bootstrap observation");
        traj.final_observation = Some(Observation(vec![0.0]));
        traj.validate().unwrap();
    }

    #[test]
    fn csv_dump_layout() {
        let traj = Trajectory {
            episode: 3,
            agent: 1,
            start_time: 0.0,
            transitions: vec![tr(1.5, false), tr(2.0, true)],
            final_observation: None,
        };
        let mut buf = Vec::new();
        write_trajectories_csv(&[traj], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "episode,agent,k,T,dt,action,reward");
        assert_eq!(lines[2], "3,1,1,1.5,2,0,1");
    }

    #[test]
    fn observation_rejects_nan() {
        assert!(Observation::new(vec![0.0, f64::NAN]).is_err());
    }
}
