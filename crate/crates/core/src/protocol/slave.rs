use std::collections::{BTreeMap, VecDeque};

use super::wire::{FollowUpMessage, SyncMessage};
use crate::clock::TimePointNs;
use crate::estimator::TimestampTuple;

pub const DEFAULT_PAIRING_TIMEOUT_NS: u64 = 1_000_000_000;
pub const DEFAULT_PENDING_CAPACITY: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlaveConfig {
    pub pairing_timeout_ns: u64,
    pub pending_capacity: usize,
    /// Known constant reception latency, subtracted from every SYNC timestamp.
    pub rx_latency_ns: i64,
}

impl Default for SlaveConfig {
    fn default() -> Self {
        SlaveConfig {
            pairing_timeout_ns: DEFAULT_PAIRING_TIMEOUT_NS,
            pending_capacity: DEFAULT_PENDING_CAPACITY,
            rx_latency_ns: 0,
        }
    }
}

/// A received SYNC waiting for its master timestamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingSync {
    pub seq: u32,
    pub t_slave_ns: TimePointNs,
    pub expiry: TimePointNs,
}

/// A FOLLOW_UP entry that overtook its SYNC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct EarlyFollowUp {
    seq: u32,
    master_time_ns: TimePointNs,
    expiry: TimePointNs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SlaveCounters {
    pub syncs_received: u64,
    pub duplicate_syncs: u64,
    /// SYNCs that timed out (or were still pending at flush) without a FOLLOW_UP.
    pub pending_expired: u64,
    /// SYNCs pushed out by the capacity limit.
    pub pending_evicted: u64,
    /// FOLLOW_UP entries that never found their SYNC.
    pub followups_unmatched: u64,
    pub tuples: u64,
}

/// Slave side: timestamps SYNC receptions and pairs them with FOLLOW_UP entries.
///
/// Pairing is by seq. A duplicate SYNC keeps the first reception time. A
/// FOLLOW_UP entry newer than every SYNC seen so far is held until its SYNC
/// arrives or the pairing timeout passes. Completed tuples are released in seq
/// order: one whose FOLLOW_UP overtook an older SYNC's waits until that SYNC is
/// paired, expires or is evicted. FOLLOW_UP delivery timing therefore never
/// changes the tuples that come out or their order.
#[derive(Debug, Clone)]
pub struct SlaveSession {
    config: SlaveConfig,
    pending: VecDeque<PendingSync>,
    early: VecDeque<EarlyFollowUp>,
    recently_paired: VecDeque<u32>,
    ready: BTreeMap<u32, TimestampTuple>,
    highest_sync_seq: Option<u32>,
    counters: SlaveCounters,
}

impl Default for SlaveSession {
    fn default() -> Self {
        Self::new(SlaveConfig::default())
    }
}

impl SlaveSession {
    pub fn new(config: SlaveConfig) -> Self {
        assert!(config.pending_capacity > 0, "pending capacity must be positive");
        SlaveSession {
            config,
            pending: VecDeque::new(),
            early: VecDeque::new(),
            recently_paired: VecDeque::new(),
            ready: BTreeMap::new(),
            highest_sync_seq: None,
            counters: SlaveCounters::default(),
        }
    }

    pub fn config(&self) -> &SlaveConfig {
        &self.config
    }

    pub fn counters(&self) -> SlaveCounters {
        self.counters
    }

    pub fn pending(&self) -> impl Iterator<Item = &PendingSync> {
        self.pending.iter()
    }

    fn expiry(&self, now: TimePointNs) -> TimePointNs {
        TimePointNs(now.0.saturating_add(self.config.pairing_timeout_ns))
    }

    fn expire(&mut self, now: TimePointNs) {
        let before = self.pending.len();
        self.pending.retain(|p| p.expiry >= now);
        self.counters.pending_expired += (before - self.pending.len()) as u64;
        let before = self.early.len();
        self.early.retain(|e| e.expiry >= now);
        self.counters.followups_unmatched += (before - self.early.len()) as u64;
    }

    fn paired(&mut self, seq: u32, t_master_ns: TimePointNs, t_slave_ns: TimePointNs) {
        if self.recently_paired.len() == self.config.pending_capacity {
            self.recently_paired.pop_front();
        }
        self.recently_paired.push_back(seq);
        self.counters.tuples += 1;
        self.ready.insert(seq, TimestampTuple { seq, t_master_ns, t_slave_ns });
    }

    /// Hands out completed tuples older than every SYNC still waiting.
    fn release(&mut self) -> Vec<TimestampTuple> {
        let held = match self.pending.iter().map(|p| p.seq).min() {
            Some(oldest) => self.ready.split_off(&oldest),
            None => BTreeMap::new(),
        };
        std::mem::replace(&mut self.ready, held).into_values().collect()
    }

    /// Records a SYNC reception and returns whatever tuples that completes or unblocks.
    pub fn on_sync(&mut self, msg: &SyncMessage, local_time_ns: TimePointNs) -> Vec<TimestampTuple> {
        self.expire(local_time_ns);
        if self.pending.iter().any(|p| p.seq == msg.seq)
            || self.recently_paired.contains(&msg.seq)
            || self.ready.contains_key(&msg.seq)
        {
            self.counters.duplicate_syncs += 1;
            return self.release();
        }
        self.counters.syncs_received += 1;
        self.highest_sync_seq = Some(self.highest_sync_seq.map_or(msg.seq, |h| h.max(msg.seq)));
        let t_slave_ns = TimePointNs(
            (local_time_ns.0 as i128 - self.config.rx_latency_ns as i128).clamp(0, u64::MAX as i128) as u64,
        );

        if let Some(i) = self.early.iter().position(|e| e.seq == msg.seq) {
            let early = self.early.remove(i).expect("index in range");
            self.paired(msg.seq, early.master_time_ns, t_slave_ns);
            return self.release();
        }

        self.pending.push_back(PendingSync {
            seq: msg.seq,
            t_slave_ns,
            expiry: self.expiry(local_time_ns),
        });
        if self.pending.len() > self.config.pending_capacity {
            self.pending.pop_front();
            self.counters.pending_evicted += 1;
        }
        self.release()
    }

    /// Pairs every entry of a FOLLOW_UP with its pending SYNC.
    pub fn on_follow_up(&mut self, msg: &FollowUpMessage, local_time_ns: TimePointNs) -> Vec<TimestampTuple> {
        self.expire(local_time_ns);
        for entry in msg.entries() {
            if let Some(i) = self.pending.iter().position(|p| p.seq == entry.seq) {
                let p = self.pending.remove(i).expect("index in range");
                self.paired(entry.seq, entry.master_time_ns, p.t_slave_ns);
            } else if self.highest_sync_seq.is_none_or(|h| entry.seq > h)
                && !self.early.iter().any(|e| e.seq == entry.seq)
            {
                self.early.push_back(EarlyFollowUp {
                    seq: entry.seq,
                    master_time_ns: entry.master_time_ns,
                    expiry: self.expiry(local_time_ns),
                });
                if self.early.len() > self.config.pending_capacity {
                    self.early.pop_front();
                    self.counters.followups_unmatched += 1;
                }
            } else {
                self.counters.followups_unmatched += 1;
            }
        }
        self.release()
    }

    /// Ends the session: everything still waiting counts as lost, and tuples
    /// held behind it are returned.
    pub fn flush(&mut self) -> Vec<TimestampTuple> {
        self.counters.pending_expired += self.pending.len() as u64;
        self.counters.followups_unmatched += self.early.len() as u64;
        self.pending.clear();
        self.early.clear();
        self.release()
    }
}
