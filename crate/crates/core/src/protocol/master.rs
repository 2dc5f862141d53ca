use thiserror::Error;

use super::wire::{FollowUpEntry, FollowUpMessage, SyncMessage, MAX_EXTRA_ENTRIES};
use crate::clock::{TimePointNs, TimestampSource, TsfTimestamp};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MasterConfig {
    /// One FOLLOW_UP per this many SYNCs; it covers every SYNC since the previous one.
    pub follow_up_every: u32,
    pub timestamp_source: TimestampSource,
}

impl Default for MasterConfig {
    fn default() -> Self {
        MasterConfig {
            follow_up_every: 1,
            timestamp_source: TimestampSource::Tsf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MasterError {
    #[error("TSF went backwards: {prev} -> {curr}")]
    TsfRegression { prev: TsfTimestamp, curr: TsfTimestamp },
    #[error("follow_up_every must be in 1..={max}, got {got}")]
    BadBatchSize { got: u32, max: usize },
    #[error("sequence number space exhausted")]
    SeqExhausted,
}

/// Messages produced for one beacon.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeaconOutput {
    pub sync: SyncMessage,
    pub follow_up: Option<FollowUpMessage>,
}

#[derive(Debug, Clone, Copy)]
struct Unsent {
    seq: u32,
    tsf_us: TsfTimestamp,
    master_time_ns: TimePointNs,
}

/// Master side: numbers beacons and hands out the master's timestamps.
#[derive(Debug, Clone)]
pub struct MasterSession {
    config: MasterConfig,
    next_seq: u32,
    last_tsf: Option<TsfTimestamp>,
    unsent: Vec<Unsent>,
}

impl MasterSession {
    pub fn new(config: MasterConfig) -> Result<Self, MasterError> {
        if config.follow_up_every == 0 || config.follow_up_every as usize > MAX_EXTRA_ENTRIES + 1 {
            return Err(MasterError::BadBatchSize {
                got: config.follow_up_every,
                max: MAX_EXTRA_ENTRIES + 1,
            });
        }
        Ok(MasterSession {
            config,
            next_seq: 1,
            last_tsf: None,
            unsent: Vec::new(),
        })
    }

    pub fn config(&self) -> &MasterConfig {
        &self.config
    }

    /// Number of beacons handled so far.
    pub fn beacons(&self) -> u32 {
        self.next_seq - 1
    }

    /// Handles one beacon, given the TSF and system clock sampled at emission.
    pub fn on_beacon(&mut self, tsf_us: TsfTimestamp, system_time_ns: TimePointNs) -> Result<BeaconOutput, MasterError> {
        if let Some(prev) = self.last_tsf {
            if tsf_us < prev {
                return Err(MasterError::TsfRegression { prev, curr: tsf_us });
            }
        }
        let seq = self.next_seq;
        self.next_seq = seq.checked_add(1).ok_or(MasterError::SeqExhausted)?;
        self.last_tsf = Some(tsf_us);

        let master_time_ns = match self.config.timestamp_source {
            TimestampSource::Tsf => tsf_us.to_ns(),
            TimestampSource::System => system_time_ns,
        };
        self.unsent.push(Unsent {
            seq,
            tsf_us,
            master_time_ns,
        });
        let follow_up = if (seq - 1).is_multiple_of(self.config.follow_up_every) {
            self.flush()
        } else {
            None
        };
        Ok(BeaconOutput {
            sync: SyncMessage { seq, tsf_us },
            follow_up,
        })
    }

    /// Emits a FOLLOW_UP for any SYNCs not yet covered.
    pub fn flush(&mut self) -> Option<FollowUpMessage> {
        let last = self.unsent.pop()?;
        let extra = self
            .unsent
            .drain(..)
            .map(|u| FollowUpEntry {
                seq: u.seq,
                master_time_ns: u.master_time_ns,
            })
            .collect();
        Some(FollowUpMessage {
            seq: last.seq,
            tsf_us: last.tsf_us,
            master_time_ns: last.master_time_ns,
            extra,
        })
    }
}
