//! Time base and the (time, seq)-ordered event queue.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Integer nanoseconds since the start of the run.
pub type SimTime = u64;

pub const NS_PER_S: f64 = 1e9;

/// Seconds to the first representable instant not before `t`.
pub fn to_ns(t: f64) -> SimTime {
    if t <= 0.0 {
        0
    } else {
        (t * NS_PER_S).ceil() as SimTime
    }
}

pub fn to_s(t: SimTime) -> f64 {
    t as f64 / NS_PER_S
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Re-evaluate the node's policy.
    Wake,
    /// Store reached the turn-on threshold.
    PowerOn,
    /// A periodic update is generated.
    UpdateDue,
    /// Charging segment ended without a crossing; keep charging.
    ChargeCheck,
    /// Decide the fate of a non-synchronized frame.
    Resolve { frame: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub time: SimTime,
    pub seq: u64,
    pub kind: EventKind,
    pub subject: u32,
    /// Device epoch at scheduling; stale events are dropped.
    pub epoch: u64,
    /// Time at which the event was scheduled (causality check).
    pub scheduled_at: SimTime,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
    now: SimTime,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Schedules at `time`, clamped to the current time so nothing runs in the past.
    pub fn push(&mut self, time: SimTime, kind: EventKind, subject: u32, epoch: u64) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event {
            time: time.max(self.now),
            seq,
            kind,
            subject,
            epoch,
            scheduled_at: self.now,
        });
        seq
    }

    pub fn pop(&mut self) -> Option<Event> {
        let e = self.heap.pop()?;
        debug_assert!(e.time >= self.now);
        self.now = e.time;
        Some(e)
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_in_time_then_seq_order() {
        let mut q = EventQueue::new();
        q.push(5, EventKind::Wake, 1, 0);
        q.push(3, EventKind::Wake, 2, 0);
        q.push(5, EventKind::PowerOn, 3, 0);
        let order: Vec<u32> = std::iter::from_fn(|| q.pop()).map(|e| e.subject).collect();
        assert_eq!(order, vec![2, 1, 3]);
    }

    #[test]
    fn ns_round_trip() {
        assert_eq!(to_ns(1.5), 1_500_000_000);
        assert_eq!(to_s(to_ns(0.25)), 0.25);
        assert!(to_s(to_ns(0.1)) >= 0.1);
    }
}
