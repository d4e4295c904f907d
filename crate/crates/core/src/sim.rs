//! Discrete-event simulation kernel.
//!
//! An [`EventQueue`] pops events in lexicographic `(time, seq)` order, so two
//! runs that schedule the same events in the same order replay identically.
//! A [`TimeBase`] decides whether relative delays are honoured exactly
//! (event-driven) or snapped onto a fixed step grid, which is how the
//! fixed time-step variants of the environments are produced from the same
//! dynamics code.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;

use crate::error::{Error, Result};

/// Non-negative, finite simulation time in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimTime(f64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0.0);

    pub fn new(seconds: f64) -> Result<Self> {
        if seconds.is_finite() && seconds >= 0.0 {
            // normalise -0.0
            Ok(SimTime(seconds + 0.0))
        } else {
            Err(Error::InvalidTime(seconds))
        }
    }

    pub fn seconds(self) -> f64 {
        self.0
    }
}

impl Eq for SimTime {}

impl Ord for SimTime {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl PartialOrd for SimTime {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.0)
    }
}

/// Identifier handed out by [`EventQueue::schedule`]; equal to the insertion sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub u64);

#[derive(Debug, Clone)]
pub struct ScheduledEvent<E> {
    pub time: SimTime,
    pub seq: u64,
    pub payload: E,
}

impl<E> ScheduledEvent<E> {
    pub fn id(&self) -> EventId {
        EventId(self.seq)
    }
}

struct Entry<E>(ScheduledEvent<E>);

// BinaryHeap is a max-heap; reverse so the smallest (time, seq) is on top.
impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.0.time, self.0.seq)
            .cmp(&(other.0.time, other.0.seq))
            .reverse()
    }
}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.0.seq == other.0.seq
    }
}

impl<E> Eq for Entry<E> {}

/// Rounds times to the nearest multiple of a fixed step (ties round up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepQuantizer {
    dt: f64,
}

impl StepQuantizer {
    pub fn new(dt: f64) -> Result<Self> {
        if dt.is_finite() && dt > 0.0 {
            Ok(StepQuantizer { dt })
        } else {
            Err(Error::Domain(format!("time step must be positive, got {dt}")))
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Index of the grid point nearest to `t`.
    pub fn steps(&self, t: f64) -> f64 {
        (t / self.dt + 0.5).floor()
    }

    pub fn quantize(&self, t: SimTime) -> SimTime {
        SimTime(self.steps(t.0) * self.dt + 0.0)
    }
}

/// How relative delays are mapped to absolute event times.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TimeBase {
    /// Events happen exactly when the dynamics say they do.
    #[default]
    EventDriven,
    /// Every event lands on the step grid. A strictly positive delay lasts
    /// at least one step, since a stepped simulator cannot resolve an event
    /// inside the step in which it was caused.
    FixedStep(StepQuantizer),
}

impl TimeBase {
    pub fn fixed_step(dt: f64) -> Result<Self> {
        Ok(TimeBase::FixedStep(StepQuantizer::new(dt)?))
    }

    /// Absolute time of an event `delay` seconds after `now`.
    pub fn resolve(&self, now: SimTime, delay: f64) -> Result<SimTime> {
        if !(delay.is_finite() && delay >= 0.0) {
            return Err(Error::Domain(format!("delay must be non-negative, got {delay}")));
        }
        match self {
            TimeBase::EventDriven => SimTime::new(now.0 + delay),
            TimeBase::FixedStep(q) => {
                let base = q.steps(now.0);
                let mut n = q.steps(delay);
                if delay > 0.0 && n < 1.0 {
                    n = 1.0;
                }
                SimTime::new((base + n) * q.dt)
            }
        }
    }

    pub fn step(&self) -> Option<f64> {
        match self {
            TimeBase::EventDriven => None,
            TimeBase::FixedStep(q) => Some(q.dt),
        }
    }
}

/// Time-ordered event queue owned by a single episode.
pub struct EventQueue<E> {
    clock: SimTime,
    heap: BinaryHeap<Entry<E>>,
    pending: HashSet<u64>,
    next_seq: u64,
    time_base: TimeBase,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::with_time_base(TimeBase::EventDriven)
    }

    pub fn with_time_base(time_base: TimeBase) -> Self {
        EventQueue {
            clock: SimTime::ZERO,
            heap: BinaryHeap::new(),
            pending: HashSet::new(),
            next_seq: 0,
            time_base,
        }
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn time_base(&self) -> TimeBase {
        self.time_base
    }

    /// Number of pending (not cancelled, not popped) events.
    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn schedule(&mut self, time: SimTime, payload: E) -> Result<EventId> {
        if time < self.clock {
            return Err(Error::SchedulingInPast {
                time: time.0,
                clock: self.clock.0,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.insert(seq);
        self.heap.push(Entry(ScheduledEvent { time, seq, payload }));
        Ok(EventId(seq))
    }

    /// Schedules `delay` seconds after the current clock, through the queue's time base.
    pub fn schedule_after(&mut self, delay: f64, payload: E) -> Result<EventId> {
        let time = self.time_base.resolve(self.clock, delay)?;
        self.schedule(time, payload)
    }

    pub fn cancel(&mut self, id: EventId) -> bool {
        self.pending.remove(&id.0)
    }

    pub fn is_pending(&self, id: EventId) -> bool {
        self.pending.contains(&id.0)
    }

    fn discard_cancelled(&mut self) {
        while let Some(top) = self.heap.peek() {
            if self.pending.contains(&top.0.seq) {
                break;
            }
            self.heap.pop();
        }
    }

    pub fn peek_time(&mut self) -> Option<SimTime> {
        self.discard_cancelled();
        self.heap.peek().map(|e| e.0.time)
    }

    pub fn pop_next(&mut self) -> Result<ScheduledEvent<E>> {
        self.discard_cancelled();
        let Entry(event) = self.heap.pop().ok_or(Error::QueueExhausted)?;
        self.pending.remove(&event.seq);
        self.clock = event.time;
        Ok(event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: f64) -> SimTime {
        SimTime::new(s).unwrap()
    }

    #[test]
    fn first_insertion_gets_id_zero() {
        let mut q = EventQueue::new();
        assert_eq!(q.schedule(t(5.0), "a").unwrap(), EventId(0));
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn earlier_time_pops_first() {
        let mut q = EventQueue::new();
        q.schedule(t(5.0), 'a').unwrap();
        q.schedule(t(3.0), 'b').unwrap();
        let e = q.pop_next().unwrap();
        assert_eq!(e.payload, 'b');
        assert_eq!(q.clock(), t(3.0));
        assert_eq!(q.pop_next().unwrap().payload, 'a');
        assert!(matches!(q.pop_next(), Err(Error::QueueExhausted)));
    }

    #[test]
    fn ties_break_by_insertion() {
        let mut q = EventQueue::new();
        q.schedule(t(5.0), 0).unwrap();
        q.schedule(t(5.0), 1).unwrap();
        assert_eq!(q.pop_next().unwrap().seq, 0);
        assert_eq!(q.pop_next().unwrap().seq, 1);
    }

    #[test]
    fn scheduling_in_past_rejected() {
        let mut q = EventQueue::new();
        q.schedule(t(4.0), ()).unwrap();
        q.pop_next().unwrap();
        assert!(matches!(
            q.schedule(t(3.0), ()),
            Err(Error::SchedulingInPast { .. })
        ));
        // same instant is fine
        q.schedule(t(4.0), ()).unwrap();
    }

    #[test]
    fn cancel_semantics() {
        let mut q = EventQueue::new();
        let a = q.schedule(t(1.0), 'a').unwrap();
        let b = q.schedule(t(2.0), 'b').unwrap();
        assert!(q.cancel(a));
        assert!(!q.cancel(a));
        assert_eq!(q.len(), 1);
        assert_eq!(q.peek_time(), Some(t(2.0)));
        assert_eq!(q.pop_next().unwrap().payload, 'b');
        assert!(!q.cancel(b));
        assert!(q.is_empty());
    }

    #[test]
    fn quantize_examples() {
        let q = StepQuantizer::new(1.0).unwrap();
        assert_eq!(q.quantize(t(2.7)).seconds(), 3.0);
        assert_eq!(q.quantize(t(0.0)).seconds(), 0.0);
        assert_eq!(q.quantize(t(2.5)).seconds(), 3.0);
        let dt = 10f64.powf(0.5);
        let q = StepQuantizer::new(dt).unwrap();
        assert!((q.quantize(t(3.3)).seconds() - 3.1623).abs() < 1e-4);
        assert!(StepQuantizer::new(0.0).is_err());
    }

    #[test]
    fn fixed_step_delays_land_on_grid() {
        let tb = TimeBase::fixed_step(1.0).unwrap();
        assert_eq!(tb.resolve(t(2.0), 2.7).unwrap(), t(5.0));
        assert_eq!(tb.resolve(t(0.0), 0.2).unwrap(), t(1.0));
        assert_eq!(tb.resolve(t(3.0), 0.0).unwrap(), t(3.0));
        let tb = TimeBase::fixed_step(10.0).unwrap();
        assert_eq!(tb.resolve(t(0.0), 3.0).unwrap(), t(10.0));
        assert_eq!(TimeBase::EventDriven.resolve(t(1.0), 2.5).unwrap(), t(3.5));
    }

    #[test]
    fn sim_time_rejects_bad_values() {
        assert!(SimTime::new(-1.0).is_err());
        assert!(SimTime::new(f64::NAN).is_err());
        assert!(SimTime::new(f64::INFINITY).is_err());
    }
}
