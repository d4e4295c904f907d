use rayon::prelude::*;

use super::{
    EpisodeBatch, EpisodeSummary, Environment, Observation, Policy, RewardAccumulator, TeamReward,
    Trajectory, Transition,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, SimRng};
use rand::SeedableRng;

/// Macro-actions shorter than this are folded into the preceding one.
const MIN_DURATION: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub summary: EpisodeSummary,
    pub trajectories: Vec<Trajectory>,
}

struct Active {
    start: f64,
    observation: Observation,
    action: usize,
    acc: RewardAccumulator,
}

struct AgentLog {
    start_time: Option<f64>,
    transitions: Vec<Transition>,
    active: Option<Active>,
}

struct Runner {
    gamma: f64,
    agents: Vec<AgentLog>,
    team_return: f64,
    team_discounted: f64,
    decisions: usize,
}

impl Runner {
    fn credit(&mut self, now: f64, rewards: &[TeamReward]) -> Result<()> {
        for r in rewards {
            match *r {
                TeamReward::Impulse(v) => {
                    self.team_return += v;
                    self.team_discounted += (-self.gamma * now).exp() * v;
                    for log in &mut self.agents {
                        if let Some(a) = &mut log.active {
                            a.acc.accrue_impulse((now - a.start).max(0.0), v)?;
                        }
                    }
                }
                TeamReward::Rate { start, end, rate } => {
                    if end > now + 1e-9 {
                        return Err(Error::Contract(format!(
                            "rate reward ends in the future ({end} > {now})"
                        )));
                    }
                    self.team_return += rate * (end - start);
                    let mut whole = RewardAccumulator::new(self.gamma)?;
                    whole.accrue_rate(start, end, rate)?;
                    self.team_discounted += whole.settle(end)?;
                    for log in &mut self.agents {
                        if let Some(a) = &mut log.active {
                            let t0 = start.max(a.start) - a.start;
                            let t1 = end - a.start;
                            if t1 > t0 {
                                a.acc.accrue_rate(t0, t1, rate)?;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Closes the active macro-action of `agent` at `now`.
    fn settle(&mut self, agent: usize, now: f64, terminal: bool) -> Result<()> {
        let log = &mut self.agents[agent];
        let Some(mut active) = log.active.take() else {
            return Ok(());
        };
        let dt = now - active.start;
        if dt <= MIN_DURATION {
            // Zero-length action: its instantaneous rewards belong to the previous one.
            let value = active.acc.settle(dt.max(0.0))?;
            if let Some(prev) = log.transitions.last_mut() {
                prev.reward += (-self.gamma * prev.duration).exp() * value;
                prev.terminal |= terminal;
            }
            return Ok(());
        }
        let reward = active.acc.settle(dt)?;
        log.transitions.push(Transition {
            observation: active.observation,
            action: active.action,
            duration: dt,
            reward,
            terminal,
        });
        Ok(())
    }

    fn decide<E: Environment, P: Policy + ?Sized>(
        &mut self,
        env: &mut E,
        policy: &P,
        deciding: &[usize],
        rng: &mut SimRng,
    ) -> Result<()> {
        let now = env.now();
        for &agent in deciding {
            if agent >= self.agents.len() {
                return Err(Error::Contract(format!("unknown agent {agent}")));
            }
            if self.agents[agent].active.is_some() {
                return Err(Error::Contract(format!(
                    "agent {agent} asked to decide while its macro-action is running"
                )));
            }
            let observation = env.observe(agent);
            let action = policy.act(agent, &observation, rng);
            if action >= env.n_actions() {
                return Err(Error::Contract(format!(
                    "policy chose action {action}, environment has {}",
                    env.n_actions()
                )));
            }
            let log = &mut self.agents[agent];
            log.start_time.get_or_insert(now);
            log.active = Some(Active {
                start: now,
                observation,
                action,
                acc: RewardAccumulator::new(self.gamma)?,
            });
            self.decisions += 1;
            let rewards = env.apply_decision(agent, action, rng)?;
            self.credit(now, &rewards)?;
        }
        Ok(())
    }
}

/// Simulates one episode under a shared decentralized policy.
///
/// The episode ends when the environment reports a terminal state, when its
/// event queue runs dry or when the next event lies beyond `horizon`. On
/// truncation the unfinished macro-actions are dropped and each trajectory
/// keeps the observation they started from for bootstrapping.
pub fn run_episode<E: Environment, P: Policy + ?Sized>(
    env: &mut E,
    policy: &P,
    rng: &mut SimRng,
    horizon: f64,
    gamma: f64,
) -> Result<EpisodeRecord> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(Error::Domain(format!("horizon must be positive, got {horizon}")));
    }
    let n = env.n_agents();
    let mut runner = Runner {
        gamma,
        agents: (0..n)
            .map(|_| AgentLog {
                start_time: None,
                transitions: Vec::new(),
                active: None,
            })
            .collect(),
        team_return: 0.0,
        team_discounted: 0.0,
        decisions: 0,
    };
    // validates gamma up front
    RewardAccumulator::new(gamma)?;

    let initial = env.reset(rng)?;
    runner.decide(env, policy, &initial, rng)?;

    let terminal = loop {
        if env.is_terminal() {
            let now = env.now();
            for agent in 0..n {
                if runner.agents[agent].active.is_some() {
                    runner.settle(agent, now, true)?;
                } else if let Some(last) = runner.agents[agent].transitions.last_mut() {
                    last.terminal = true;
                }
            }
            break true;
        }
        match env.next_event_time() {
            Some(t) if t <= horizon => {}
            _ => break false,
        }
        let step = env.advance(rng)?;
        let now = env.now();
        runner.credit(now, &step.rewards)?;
        for &agent in &step.deciding {
            // an agent's very first decision may be prompted by an event
            if runner
                .agents
                .get(agent)
                .is_some_and(|a| a.active.is_none() && a.start_time.is_some())
            {
                return Err(Error::Contract(format!(
                    "agent {agent} reported a macro-action end without one running"
                )));
            }
            runner.settle(agent, now, false)?;
        }
        if env.is_terminal() {
            continue;
        }
        runner.decide(env, policy, &step.deciding, rng)?;
    };

    let sim_duration = if terminal { env.now() } else { env.now().min(horizon) };
    let trajectories = runner
        .agents
        .into_iter()
        .enumerate()
        .filter_map(|(agent, log)| {
            if log.transitions.is_empty() {
                return None;
            }
            let final_observation = match (terminal, log.active) {
                (true, _) => None,
                (false, Some(a)) => Some(a.observation),
                // queue ran dry right after a settle: nothing running to bootstrap from
                (false, None) => None,
            };
            let mut transitions = log.transitions;
            if !terminal && final_observation.is_none() {
                if let Some(last) = transitions.last_mut() {
                    last.terminal = true;
                }
            }
            Some(Trajectory {
                episode: 0,
                agent,
                start_time: log.start_time.unwrap_or(0.0),
                transitions,
                final_observation,
            })
        })
        .collect();

    Ok(EpisodeRecord {
        summary: EpisodeSummary {
            index: 0,
            seed: 0,
            sim_duration,
            terminal,
            team_return: runner.team_return,
            team_discounted_return: runner.team_discounted,
            decisions: runner.decisions,
        },
        trajectories,
    })
}

/// Runs `episodes` independent episodes in parallel. Episode `i` uses its own
/// environment from `factory` and an RNG stream derived from `(seed, stream, i)`,
/// so the result does not depend on thread scheduling.
pub fn collect_batch<E, F, P>(
    factory: F,
    policy: &P,
    episodes: usize,
    seed: u64,
    stream: u64,
    horizon: f64,
    gamma: f64,
) -> Result<EpisodeBatch>
where
    E: Environment,
    F: Fn() -> E + Sync,
    P: Policy + Sync + ?Sized,
{
    let records: Vec<Result<EpisodeRecord>> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let ep_seed = derive_seed(seed, &[stream, i as u64]);
            let mut rng = SimRng::seed_from_u64(ep_seed);
            let mut env = factory();
            let mut rec = run_episode(&mut env, policy, &mut rng, horizon, gamma)?;
            rec.summary.index = i;
            rec.summary.seed = ep_seed;
            for t in &mut rec.trajectories {
                t.episode = i;
            }
            Ok(rec)
        })
        .collect();
    let mut batch = EpisodeBatch::default();
    for r in records {
        batch.push(r?);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::macdec::Step;
    use crate::sim::EventQueue;

    /// Two agents whose macro-actions last `1 + action` seconds; each completion pays 1 to the team.
    struct Toy {
        queue: EventQueue<usize>,
        terminal_at: Option<f64>,
    }

    impl Environment for Toy {
        fn n_agents(&self) -> usize {
            2
        }
        fn n_actions(&self) -> usize {
            2
        }
        fn observation_dim(&self) -> usize {
            1
        }
        fn reset(&mut self, _rng: &mut SimRng) -> Result<Vec<usize>> {
            self.queue = EventQueue::new();
            Ok(vec![0, 1])
        }
        fn now(&self) -> f64 {
            self.queue.clock().seconds()
        }
        fn next_event_time(&mut self) -> Option<f64> {
            self.queue.peek_time().map(|t| t.seconds())
        }
        fn advance(&mut self, _rng: &mut SimRng) -> Result<Step> {
            let ev = self.queue.pop_next()?;
            Ok(Step {
                rewards: vec![TeamReward::Impulse(1.0)],
                deciding: vec![ev.payload],
            })
        }
        fn observe(&self, agent: usize) -> Observation {
            Observation(vec![agent as f64])
        }
        fn apply_decision(
            &mut self,
            agent: usize,
            action: usize,
            _rng: &mut SimRng,
        ) -> Result<Vec<TeamReward>> {
            self.queue.schedule_after(1.0 + action as f64, agent)?;
            Ok(vec![])
        }
        fn is_terminal(&self) -> bool {
            self.terminal_at.is_some_and(|t| self.now() >= t)
        }
    }

    fn toy(terminal_at: Option<f64>) -> Toy {
        Toy {
            queue: EventQueue::new(),
            terminal_at,
        }
    }

    #[test]
    fn decision_times_match_clock() {
        let policy = |agent: usize, _: &Observation, _: &mut SimRng| agent;
        let mut rng = SimRng::seed_from_u64(0);
        let rec = run_episode(&mut toy(None), &policy, &mut rng, 10.0, 0.0).unwrap();
        let a0 = &rec.trajectories[0];
        let a1 = &rec.trajectories[1];
        // agent 0 acts every second, agent 1 every two seconds
        assert_eq!(a0.len(), 10);
        assert_eq!(a1.len(), 5);
        assert!(a0.total_duration() <= 10.0 && a1.total_duration() <= 10.0);
        // rewards: agent 1 sees its own completion plus agent 0's two
        assert_eq!(a1.transitions[1].reward, 3.0);
        assert!(a1.final_observation.is_some());
        assert_eq!(rec.summary.team_return, 15.0);
        a0.validate().unwrap();
    }

    #[test]
    fn terminal_state_closes_all_agents() {
        let policy = |_: usize, _: &Observation, _: &mut SimRng| 0;
        let mut rng = SimRng::seed_from_u64(0);
        let rec = run_episode(&mut toy(Some(3.0)), &policy, &mut rng, 100.0, 0.0).unwrap();
        assert!(rec.summary.terminal);
        for t in &rec.trajectories {
            t.validate().unwrap();
            assert!(t.is_terminal());
            assert!((t.total_duration() - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_action_is_contract_error() {
        let policy = |_: usize, _: &Observation, _: &mut SimRng| 7;
        let mut rng = SimRng::seed_from_u64(0);
        let err = run_episode(&mut toy(None), &policy, &mut rng, 10.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn zero_horizon_rejected() {
        let policy = |_: usize, _: &Observation, _: &mut SimRng| 0;
        let mut rng = SimRng::seed_from_u64(0);
        assert!(run_episode(&mut toy(None), &policy, &mut rng, 0.0, 0.0).is_err());
    }

    #[test]
    fn batch_is_deterministic() {
        let policy = crate::macdec::UniformPolicy { n_actions: 2 };
        let a = collect_batch(|| toy(None), &policy, 8, 3, 0, 20.0, 0.1).unwrap();
        let b = collect_batch(|| toy(None), &policy, 8, 3, 0, 20.0, 0.1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.episodes.len(), 8);
    }
}
