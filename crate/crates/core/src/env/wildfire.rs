//! Wildfire fighting with unmanned aircraft.
//!
//! At each decision an aircraft either holds where it is for a random time
//! or flies straight to one of its five closest fires. Holding at a live fire
//! attacks it; a fire is put out once the aircraft attacking it have jointly
//! spent strictly more than `fire_health` seconds on it, which pays
//! `extinguish_reward` to the team. Starting an attack on a fire somebody
//! else is already attacking costs the team `penalty` at once.
//!
//! Observation layout, 22 values: own `x / 2`, `y / 2`, then for each of the
//! five nearest fires `distance / 2`, `others interested / max(N - 1, 1)`,
//! `extinguished` (0 or 1), `remaining health / fire_health`.

use std::collections::BTreeSet;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::macdec::{Environment, Observation, Policy, Step, TeamReward};
use crate::rng::SimRng;
use crate::sim::{EventId, EventQueue, SimTime, TimeBase};

pub const N_SLOTS: usize = 5;
pub const N_ACTIONS: usize = N_SLOTS + 1;
pub const HOLD: usize = 0;
pub const OBS_DIM: usize = 2 + 4 * N_SLOTS;
const POSITION_SCALE: f64 = 2.0;
const EPS: f64 = 1e-9;
/// Attack time after which a fully worn-down fire goes out.
const FINISHING_ATTACK: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn lerp(self, other: Point, f: f64) -> Point {
        Point::new(self.x + (other.x - self.x) * f, self.y + (other.y - self.y) * f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WildfireConfig {
    pub n_aircraft: usize,
    pub n_fires: usize,
    /// m/s.
    pub speed: f64,
    pub hold_mean: f64,
    pub hold_std: f64,
    /// Lower truncation of sampled hold durations.
    pub min_hold: f64,
    /// Lower bound on any flight, including to the fire the aircraft is at.
    pub min_flight: f64,
    /// Attack-seconds each fire absorbs before it can go out.
    pub fire_health: f64,
    /// Episode length, seconds.
    pub horizon: f64,
    pub extinguish_reward: f64,
    pub penalty: f64,
    pub cluster_radius: f64,
    pub fire_radius: f64,
    /// Aircraft spawn uniformly in `[-spawn_half_width, spawn_half_width]^2`.
    pub spawn_half_width: f64,
}

impl Default for WildfireConfig {
    fn default() -> Self {
        WildfireConfig {
            n_aircraft: 3,
            n_fires: 9,
            speed: 0.015,
            hold_mean: 3.0,
            hold_std: 0.3,
            min_hold: 0.1,
            min_flight: 0.1,
            fire_health: 3.0,
            horizon: 265.0,
            extinguish_reward: 1.0,
            penalty: 20.0,
            cluster_radius: 0.99,
            fire_radius: 0.01,
            spawn_half_width: 1.0,
        }
    }
}

impl WildfireConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_aircraft == 0 {
            return Err(Error::Domain("at least one aircraft is required".into()));
        }
        if self.n_fires != 9 {
            return Err(Error::Domain(format!(
                "the clustered layout has 9 fires, got {}",
                self.n_fires
            )));
        }
        let positive = [
            self.speed,
            self.hold_mean,
            self.min_hold,
            self.min_flight,
            self.fire_health,
            self.horizon,
            self.cluster_radius,
            self.fire_radius,
            self.spawn_half_width,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Domain("wildfire parameters must be positive".into()));
        }
        if !(self.hold_std.is_finite() && self.hold_std >= 0.0) {
            return Err(Error::Domain("hold_std must be >= 0".into()));
        }
        Ok(())
    }
}

/// Three clusters of three fires around centroids on a circle.
pub fn fire_layout(cfg: &WildfireConfig) -> Vec<Point> {
    let angles = [90.0_f64, 210.0, 330.0].map(f64::to_radians);
    let mut out = Vec::with_capacity(9);
    for &a in &angles {
        let c = Point::new(cfg.cluster_radius * a.cos(), cfg.cluster_radius * a.sin());
        for &b in &angles {
            out.push(Point::new(
                c.x + cfg.fire_radius * b.cos(),
                c.y + cfg.fire_radius * b.sin(),
            ));
        }
    }
    out
}

/// Indices of the `n` fires closest to `pos`, ties broken by index.
pub fn nearest_fires(fires: &[Point], pos: Point, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..fires.len()).collect();
    idx.sort_by(|&a, &b| {
        pos.distance(fires[a])
            .total_cmp(&pos.distance(fires[b]))
            .then(a.cmp(&b))
    });
    idx.truncate(n);
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FireEvent {
    Arrive(usize),
    HoldEnd(usize),
    Check(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Activity {
    Deciding,
    Flying {
        fire: usize,
        from: Point,
        depart: f64,
        arrive: f64,
        event: EventId,
    },
    Attacking {
        fire: usize,
        end: f64,
        event: EventId,
    },
    Idling {
        event: EventId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Aircraft {
    pos: Point,
    activity: Activity,
}

impl Aircraft {
    fn target(&self) -> Option<usize> {
        match self.activity {
            Activity::Flying { fire, .. } | Activity::Attacking { fire, .. } => Some(fire),
            _ => None,
        }
    }

    fn pending(&self) -> Option<EventId> {
        match self.activity {
            Activity::Flying { event, .. }
            | Activity::Attacking { event, .. }
            | Activity::Idling { event } => Some(event),
            Activity::Deciding => None,
        }
    }

    fn position_at(&self, now: f64) -> Point {
        match self.activity {
            Activity::Flying {
                from, depart, arrive, ..
            } if arrive > depart => self.pos_toward(from, ((now - depart) / (arrive - depart)).clamp(0.0, 1.0)),
            _ => self.pos,
        }
    }

    fn pos_toward(&self, from: Point, f: f64) -> Point {
        from.lerp(self.pos, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Fire {
    pos: Point,
    /// Attack-seconds accumulated up to `updated`.
    progress: f64,
    updated: f64,
    attackers: usize,
    extinguished: bool,
    check: Option<EventId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Hold,
    Fly,
    Arrive,
    HoldEnd,
    Penalty,
    Extinguish,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Hold => "hold",
            EventKind::Fly => "fly",
            EventKind::Arrive => "arrive",
            EventKind::HoldEnd => "hold_end",
            EventKind::Penalty => "penalty",
            EventKind::Extinguish => "extinguish",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub kind: EventKind,
    pub agent: Option<usize>,
    pub fire: Option<usize>,
}

/// Writes `time,event_kind,agent,fire`; missing fields are left empty.
pub fn write_events_csv<W: Write>(events: &[EventRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "event_kind", "agent", "fire"])?;
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in events {
        w.write_record([e.time.to_string(), e.kind.as_str().to_string(), opt(e.agent), opt(e.fire)])?;
    }
    w.flush()?;
    Ok(())
}

pub struct Wildfire {
    config: WildfireConfig,
    time_base: TimeBase,
    layout: Vec<Point>,
    queue: EventQueue<FireEvent>,
    aircraft: Vec<Aircraft>,
    fires: Vec<Fire>,
    hold_dist: Normal<f64>,
    forced_holds: Vec<f64>,
    forced_starts: Option<Vec<Point>>,
    events: Vec<EventRecord>,
}

impl Wildfire {
    pub fn new(config: WildfireConfig) -> Result<Self> {
        Self::with_time_base(config, TimeBase::EventDriven)
    }

    /// The same dynamics with every event time snapped to a `dt` grid.
    pub fn fixed_step(config: WildfireConfig, dt: f64) -> Result<Self> {
        Self::with_time_base(config, TimeBase::fixed_step(dt)?)
    }

    pub fn with_time_base(config: WildfireConfig, time_base: TimeBase) -> Result<Self> {
        config.validate()?;
        let hold_dist = Normal::new(config.hold_mean, config.hold_std)
            .map_err(|e| Error::Domain(format!("hold distribution: {e}")))?;
        let layout = fire_layout(&config);
        let mut env = Wildfire {
            queue: EventQueue::with_time_base(time_base),
            time_base,
            aircraft: Vec::new(),
            fires: Vec::new(),
            hold_dist,
            forced_holds: Vec::new(),
            forced_starts: None,
            events: Vec::new(),
            layout,
            config,
        };
        env.init(&[])?;
        Ok(env)
    }

    pub fn config(&self) -> &WildfireConfig {
        &self.config
    }

    pub fn fire_positions(&self) -> &[Point] {
        &self.layout
    }

    /// Replaces random hold durations with these, consumed in order.
    pub fn force_hold_durations(&mut self, holds: Vec<f64>) {
        self.forced_holds = holds.into_iter().rev().collect();
    }

    /// Starts the next episodes from these aircraft positions instead of random ones.
    pub fn force_start_positions(&mut self, positions: Vec<Point>) {
        self.forced_starts = Some(positions);
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn is_extinguished(&self, fire: usize) -> bool {
        self.fires[fire].extinguished
    }

    pub fn position(&self, agent: usize) -> Point {
        self.aircraft[agent].position_at(self.now_s())
    }

    /// Attack-seconds still needed by a fire at the current time, 0 once extinguished.
    pub fn remaining_health(&self, fire: usize) -> f64 {
        let f = &self.fires[fire];
        if f.extinguished {
            return 0.0;
        }
        let progress = f.progress + f.attackers as f64 * (self.now_s() - f.updated);
        (self.config.fire_health - progress).max(0.0)
    }

    /// Sum over fires of aircraft targeting them.
    pub fn total_interest(&self) -> usize {
        (0..self.fires.len()).map(|f| self.interest(f, None)).sum()
    }

    fn now_s(&self) -> f64 {
        self.queue.clock().seconds()
    }

    fn init(&mut self, starts: &[Point]) -> Result<()> {
        self.queue = EventQueue::with_time_base(self.time_base);
        self.events.clear();
        self.fires = self
            .layout
            .iter()
            .map(|&pos| Fire {
                pos,
                progress: 0.0,
                updated: 0.0,
                attackers: 0,
                extinguished: false,
                check: None,
            })
            .collect();
        self.aircraft = (0..self.config.n_aircraft)
            .map(|i| Aircraft {
                pos: starts.get(i).copied().unwrap_or_default(),
                activity: Activity::Deciding,
            })
            .collect();
        Ok(())
    }

    fn log(&mut self, kind: EventKind, agent: Option<usize>, fire: Option<usize>) {
        self.events.push(EventRecord {
            time: self.now_s(),
            kind,
            agent,
            fire,
        });
    }

    fn interest(&self, fire: usize, excluding: Option<usize>) -> usize {
        self.aircraft
            .iter()
            .enumerate()
            .filter(|&(i, a)| Some(i) != excluding && a.target() == Some(fire))
            .count()
    }

    fn sample_hold(&mut self, rng: &mut SimRng) -> f64 {
        let d = self
            .forced_holds
            .pop()
            .unwrap_or_else(|| self.hold_dist.sample(rng));
        d.max(self.config.min_hold)
    }

    /// Live fire the aircraft is sitting on, if any.
    fn live_fire_at(&self, pos: Point) -> Option<usize> {
        let nearest = nearest_fires(&self.layout, pos, 1)[0];
        (pos.distance(self.layout[nearest]) <= EPS && !self.fires[nearest].extinguished)
            .then_some(nearest)
    }

    fn update_progress(&mut self, fire: usize) {
        let now = self.now_s();
        let f = &mut self.fires[fire];
        f.progress += f.attackers as f64 * (now - f.updated);
        f.updated = now;
    }

    fn is_done(&self, fire: usize) -> bool {
        let now = self.now_s();
        let f = &self.fires[fire];
        let health = self.config.fire_health;
        if f.progress > health + EPS {
            return true;
        }
        // worn down exactly to zero: goes out only if the attack carries on
        f.progress >= health - EPS
            && self.aircraft.iter().any(|a| {
                matches!(a.activity, Activity::Attacking { fire: t, end, .. } if t == fire && end > now + EPS)
            })
    }

    fn reschedule_check(&mut self, fire: usize) -> Result<()> {
        if let Some(id) = self.fires[fire].check.take() {
            self.queue.cancel(id);
        }
        let f = &self.fires[fire];
        if f.extinguished || f.attackers == 0 {
            return Ok(());
        }
        let remaining = self.config.fire_health - f.progress;
        let delay = if remaining > EPS {
            remaining / f.attackers as f64
        } else {
            FINISHING_ATTACK
        };
        let id = self.queue.schedule_after(delay, FireEvent::Check(fire))?;
        self.fires[fire].check = Some(id);
        Ok(())
    }

    fn extinguish(&mut self, fire: usize, step: &mut Step, deciding: &mut BTreeSet<usize>) {
        let now = self.now_s();
        let f = &mut self.fires[fire];
        f.extinguished = true;
        f.attackers = 0;
        if let Some(id) = f.check.take() {
            self.queue.cancel(id);
        }
        step.rewards.push(TeamReward::Impulse(self.config.extinguish_reward));
        self.log(EventKind::Extinguish, None, Some(fire));
        for i in 0..self.aircraft.len() {
            if self.aircraft[i].target() != Some(fire) {
                continue;
            }
            if let Some(id) = self.aircraft[i].pending() {
                self.queue.cancel(id);
            }
            let pos = self.aircraft[i].position_at(now);
            self.aircraft[i] = Aircraft {
                pos,
                activity: Activity::Deciding,
            };
            deciding.insert(i);
        }
    }

    fn all_extinguished(&self) -> bool {
        self.fires.iter().all(|f| f.extinguished)
    }
}

impl Environment for Wildfire {
    fn n_agents(&self) -> usize {
        self.config.n_aircraft
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn observation_dim(&self) -> usize {
        OBS_DIM
    }

    fn reset(&mut self, rng: &mut SimRng) -> Result<Vec<usize>> {
        let w = self.config.spawn_half_width;
        let starts: Vec<Point> = match &self.forced_starts {
            Some(p) => p.clone(),
            None => (0..self.config.n_aircraft)
                .map(|_| Point::new(rng.random_range(-w..=w), rng.random_range(-w..=w)))
                .collect(),
        };
        if starts.len() != self.config.n_aircraft {
            return Err(Error::Contract("one start position per aircraft is required".into()));
        }
        self.init(&starts)?;
        Ok((0..self.config.n_aircraft).collect())
    }

    fn now(&self) -> f64 {
        self.now_s()
    }

    fn next_event_time(&mut self) -> Option<f64> {
        self.queue.peek_time().map(SimTime::seconds)
    }

    fn advance(&mut self, _rng: &mut SimRng) -> Result<Step> {
        let ev = self.queue.pop_next()?;
        let mut step = Step::default();
        let mut deciding = BTreeSet::new();
        match ev.payload {
            FireEvent::Arrive(i) => {
                let Activity::Flying { .. } = self.aircraft[i].activity else {
                    return Err(Error::Simulation(format!("aircraft {i} arrived without flying")));
                };
                self.aircraft[i].activity = Activity::Deciding;
                self.log(EventKind::Arrive, Some(i), None);
                deciding.insert(i);
            }
            FireEvent::HoldEnd(i) => {
                self.log(EventKind::HoldEnd, Some(i), None);
                if let Activity::Attacking { fire, .. } = self.aircraft[i].activity {
                    self.update_progress(fire);
                    if self.is_done(fire) {
                        self.extinguish(fire, &mut step, &mut deciding);
                    } else {
                        self.fires[fire].attackers -= 1;
                        self.reschedule_check(fire)?;
                    }
                }
                self.aircraft[i].activity = Activity::Deciding;
                deciding.insert(i);
            }
            FireEvent::Check(fire) => {
                self.fires[fire].check = None;
                self.update_progress(fire);
                if self.is_done(fire) {
                    self.extinguish(fire, &mut step, &mut deciding);
                } else {
                    self.reschedule_check(fire)?;
                }
            }
        }
        step.deciding = deciding.into_iter().collect();
        Ok(step)
    }

    fn observe(&self, agent: usize) -> Observation {
        let now = self.now_s();
        let pos = self.aircraft[agent].position_at(now);
        let others = (self.config.n_aircraft.max(2) - 1) as f64;
        let mut obs = Vec::with_capacity(OBS_DIM);
        obs.push(pos.x / POSITION_SCALE);
        obs.push(pos.y / POSITION_SCALE);
        for f in nearest_fires(&self.layout, pos, N_SLOTS) {
            obs.push(pos.distance(self.layout[f]) / POSITION_SCALE);
            obs.push(self.interest(f, Some(agent)) as f64 / others);
            obs.push(if self.fires[f].extinguished { 1.0 } else { 0.0 });
            obs.push(self.remaining_health(f) / self.config.fire_health);
        }
        Observation(obs)
    }

    fn apply_decision(&mut self, agent: usize, action: usize, rng: &mut SimRng) -> Result<Vec<TeamReward>> {
        if action >= N_ACTIONS {
            return Err(Error::Contract(format!("wildfire action {action} out of range")));
        }
        if self.aircraft[agent].activity != Activity::Deciding {
            return Err(Error::Contract(format!("aircraft {agent} is not at a decision point")));
        }
        let now = self.now_s();
        let pos = self.aircraft[agent].pos;
        let mut rewards = Vec::new();
        if action == HOLD {
            let duration = self.sample_hold(rng);
            let event = self.queue.schedule_after(duration, FireEvent::HoldEnd(agent))?;
            let end = self
                .time_base
                .resolve(SimTime::new(now)?, duration)?
                .seconds();
            match self.live_fire_at(pos) {
                Some(fire) => {
                    self.log(EventKind::Hold, Some(agent), Some(fire));
                    if self.fires[fire].attackers > 0 {
                        rewards.push(TeamReward::Impulse(-self.config.penalty));
                        self.log(EventKind::Penalty, Some(agent), Some(fire));
                    }
                    self.update_progress(fire);
                    self.fires[fire].attackers += 1;
                    self.aircraft[agent].activity = Activity::Attacking { fire, end, event };
                    self.reschedule_check(fire)?;
                }
                None => {
                    self.log(EventKind::Hold, Some(agent), None);
                    self.aircraft[agent].activity = Activity::Idling { event };
                }
            }
        } else {
            let fire = nearest_fires(&self.layout, pos, N_SLOTS)[action - 1];
            let target = self.layout[fire];
            let flight = (pos.distance(target) / self.config.speed).max(self.config.min_flight);
            let event = self.queue.schedule_after(flight, FireEvent::Arrive(agent))?;
            let arrive = self.time_base.resolve(SimTime::new(now)?, flight)?.seconds();
            self.log(EventKind::Fly, Some(agent), Some(fire));
            self.aircraft[agent] = Aircraft {
                pos: target,
                activity: Activity::Flying {
                    fire,
                    from: pos,
                    depart: now,
                    arrive,
                    event,
                },
            };
        }
        Ok(rewards)
    }

    fn is_terminal(&self) -> bool {
        self.all_extinguished()
    }
}

/// Fire-choice probabilities of the scripted policy, closest fire first.
pub const SCRIPTED_FIRE_PROBS: [f64; N_SLOTS] = [0.150705, 0.149548, 0.679966, 0.0169208, 0.00286071];
pub const SCRIPTED_HOLD_UNCONTESTED: f64 = 0.84;
pub const SCRIPTED_HOLD_CONTESTED: f64 = 0.27;

/// Hand-written approximation of a trained policy, given the two uniform
/// draws it consumes: `hold_draw` decides whether to hold at a live fire and
/// `fire_draw` picks the fire to fly to otherwise.
pub fn scripted_action(observation: &Observation, hold_draw: f64, fire_draw: f64) -> usize {
    let o = observation.as_slice();
    let at_live_fire = o[2] <= EPS && o[4] == 0.0;
    if at_live_fire {
        let p = if o[3] > 0.0 {
            SCRIPTED_HOLD_CONTESTED
        } else {
            SCRIPTED_HOLD_UNCONTESTED
        };
        if hold_draw < p {
            return HOLD;
        }
    }
    let total: f64 = SCRIPTED_FIRE_PROBS.iter().sum();
    let mut acc = 0.0;
    for (slot, p) in SCRIPTED_FIRE_PROBS.iter().enumerate() {
        acc += p / total;
        if fire_draw < acc {
            return slot + 1;
        }
    }
    N_SLOTS
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedPolicy;

impl Policy for ScriptedPolicy {
    fn act(&self, _agent: usize, observation: &Observation, rng: &mut SimRng) -> usize {
        let hold_draw: f64 = rng.random();
        let fire_draw: f64 = rng.random();
        scripted_action(observation, hold_draw, fire_draw)
    }
}
