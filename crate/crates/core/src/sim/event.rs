use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::clock::TimePointNs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    BeaconEmit,
    SyncDeliver,
    FollowUpDeliver,
    ServoTick,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub fire_at: TimePointNs,
    pub kind: EventKind,
    /// Encoded message for deliveries, empty otherwise.
    pub payload: Vec<u8>,
}

#[derive(Debug)]
struct Scheduled {
    order: u64,
    event: SimEvent,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest (fire_at, order) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.event.fire_at, other.order).cmp(&(self.event.fire_at, self.order))
    }
}

/// Priority queue executing events in (fire_at, insertion order).
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    next_order: u64,
    now: TimePointNs,
}

impl EventQueue {
    pub fn new() -> Self {
        Self::default()
    }

    /// Current virtual time: the fire time of the last popped event.
    pub fn now(&self) -> TimePointNs {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedules an event. Events may not be scheduled in the past.
    pub fn push(&mut self, event: SimEvent) {
        assert!(
            event.fire_at >= self.now,
            "event at {} scheduled before current time {}",
            event.fire_at,
            self.now
        );
        let order = self.next_order;
        self.next_order += 1;
        self.heap.push(Scheduled { order, event });
    }

    pub fn pop(&mut self) -> Option<SimEvent> {
        let s = self.heap.pop()?;
        self.now = s.event.fire_at;
        Some(s.event)
    }
}
