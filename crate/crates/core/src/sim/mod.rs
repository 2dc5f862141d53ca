//! Deterministic discrete-event simulation of one master and one slave on a
//! broadcast channel.
//!
//! The master emits a beacon every `beacon_interval_ns` of its own clock. The
//! SYNC reaches the slave through `sync_channel` (which models reception
//! jitter) and the FOLLOW_UP through `followup_channel`. The slave runs the
//! same [`SlaveNode`] as the UDP daemon and disciplines its simulated clock
//! with the servo output whenever a tuple is formed.
//!
//! Randomness comes from ChaCha20 (`rand_chacha`), seeded with
//! `SimConfig::seed` and split into one stream per consumer (see
//! [`RngStream`]). The same config therefore always yields the same trace,
//! byte for byte, on every platform.

mod channel;
mod event;

use std::collections::HashMap;

use thiserror::Error;

pub use channel::{
    stream_rng, ChannelError, ChannelModel, DelayDistribution, Delivery, LinkPreset, RngStream, DEFAULT_MIN_DELAY_NS,
};
pub use event::{EventKind, EventQueue, SimEvent};

use crate::clock::{ClockError, SimulatedClock, TimePointNs, TimestampSource};
use crate::estimator::{OffsetIncrement, TimestampTuple, DEFAULT_WINDOW};
use crate::node::{apply_action_since, SlaveNode, TupleOutcome};
use crate::protocol::{
    decode, encode, MasterConfig, MasterError, MasterSession, Message, SlaveConfig, DEFAULT_PAIRING_TIMEOUT_NS,
    DEFAULT_PENDING_CAPACITY,
};
use crate::servo::{ServoConfig, ServoError};
use crate::stats::{compute_stats, SummaryMetrics};
use crate::trace::TraceRecord;

pub const DEFAULT_BEACON_INTERVAL_NS: u64 = 102_400_000;
pub const DEFAULT_START_TRUE_NS: u64 = 10_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockSpec {
    pub offset_ns: i64,
    pub skew_ppm: f64,
}

impl ClockSpec {
    pub const IDEAL: ClockSpec = ClockSpec {
        offset_ns: 0,
        skew_ppm: 0.0,
    };

    pub fn skewed(skew_ppm: f64) -> Self {
        ClockSpec {
            offset_ns: 0,
            skew_ppm,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub beacon_interval_ns: u64,
    pub follow_up_every: u32,
    pub timestamp_source: TimestampSource,
    pub master_clock: ClockSpec,
    pub slave_clock: ClockSpec,
    pub sync_channel: ChannelModel,
    pub followup_channel: ChannelModel,
    /// Probability that the slave misses a SYNC altogether, on top of the channel's own drops.
    pub sync_drop_prob: f64,
    /// `None` disables clock disciplining; estimation still runs.
    pub servo: Option<ServoConfig>,
    pub skew_window: usize,
    pub pairing_timeout_ns: u64,
    pub pending_capacity: usize,
    pub rx_latency_ns: i64,
    /// True time of the first beacon.
    pub start_true_ns: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 1,
            duration_s: 300.0,
            beacon_interval_ns: DEFAULT_BEACON_INTERVAL_NS,
            follow_up_every: 1,
            timestamp_source: TimestampSource::Tsf,
            master_clock: ClockSpec::IDEAL,
            slave_clock: ClockSpec::IDEAL,
            sync_channel: ChannelModel::fixed(DEFAULT_MIN_DELAY_NS),
            followup_channel: ChannelModel::fixed(1_000_000),
            sync_drop_prob: 0.0,
            servo: Some(ServoConfig::default()),
            skew_window: DEFAULT_WINDOW,
            pairing_timeout_ns: DEFAULT_PAIRING_TIMEOUT_NS,
            pending_capacity: DEFAULT_PENDING_CAPACITY,
            rx_latency_ns: 0,
            start_true_ns: DEFAULT_START_TRUE_NS,
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error(transparent)]
    Master(#[from] MasterError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error("{0} channel: {1}")]
    Channel(&'static str, ChannelError),
}

impl SimConfig {
    pub fn duration_ns(&self) -> u64 {
        (self.duration_s * 1e9).round() as u64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s must be > 0, got {}", self.duration_s));
        }
        if self.beacon_interval_ns == 0 {
            return bad("beacon interval must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.sync_drop_prob) {
            return bad(format!("sync_drop_prob {} outside [0, 1]", self.sync_drop_prob));
        }
        if self.skew_window < 2 {
            return bad("skew_window must be >= 2".into());
        }
        if self.pending_capacity == 0 {
            return bad("pending_capacity must be >= 1".into());
        }
        self.sync_channel.validate().map_err(|e| SimError::Channel("sync", e))?;
        self.followup_channel.validate().map_err(|e| SimError::Channel("followup", e))?;
        if let Some(servo) = &self.servo {
            servo.validate()?;
        }
        for (name, c) in [("master", self.master_clock), ("slave", self.slave_clock)] {
            let clock = SimulatedClock::new(c.offset_ns, c.skew_ppm)?;
            if clock.value_at(TimePointNs(self.start_true_ns))? < 0 {
                return bad(format!("{name} clock reads negative at the start time; raise start_true_ns"));
            }
        }
        Ok(())
    }
}

/// Per-run bookkeeping. Every beacon ends up in exactly one of: a tuple, a
/// SYNC drop, a FOLLOW_UP loss, or a pairing expiry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Accounting {
    pub beacons: u64,
    pub tuples: u64,
    /// SYNCs the slave never received.
    pub sync_drops: u64,
    /// Received SYNCs whose FOLLOW_UP entry was lost on the channel.
    pub followup_losses: u64,
    /// Received SYNCs whose FOLLOW_UP arrived too late or was displaced.
    pub pairing_expiries: u64,
    /// SYNCs the slave gave up on (expired, evicted or left over), as counted by the slave.
    pub slave_unpaired: u64,
    pub followups_sent: u64,
    pub followups_unmatched: u64,
    pub estimator_discards: u64,
    pub session_faults: u64,
}

impl Accounting {
    pub fn conserved(&self) -> bool {
        self.slave_unpaired == self.followup_losses + self.pairing_expiries
            && self.beacons == self.tuples + self.sync_drops + self.followup_losses + self.pairing_expiries
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub trace: Vec<TraceRecord>,
    pub accounting: Accounting,
    pub increments: Vec<OffsetIncrement>,
    /// Disciplined-clock offset over all rows, in ns.
    pub offset_stats: Option<SummaryMetrics>,
}

struct Run<'a> {
    config: &'a SimConfig,
    queue: EventQueue,
    master_clock: SimulatedClock,
    slave_clock: SimulatedClock,
    master: MasterSession,
    node: SlaveNode,
    formed: std::collections::VecDeque<TimestampTuple>,
    rx_offsets: HashMap<u32, i64>,
    sync_dropped: Vec<u32>,
    followup_dropped: Vec<u32>,
    trace: Vec<TraceRecord>,
    acct: Accounting,
}

pub fn run_simulation(config: &SimConfig) -> Result<SimOutcome, SimError> {
    config.validate()?;
    let max_freq = config.servo.as_ref().map_or(crate::clock::DEFAULT_MAX_FREQ_PPB, |s| s.max_freq_ppb as i64);
    let mut run = Run {
        config,
        queue: EventQueue::new(),
        master_clock: SimulatedClock::new(config.master_clock.offset_ns, config.master_clock.skew_ppm)?,
        slave_clock: SimulatedClock::new(config.slave_clock.offset_ns, config.slave_clock.skew_ppm)?
            .with_max_freq_ppb(max_freq),
        master: MasterSession::new(MasterConfig {
            follow_up_every: config.follow_up_every,
            timestamp_source: config.timestamp_source,
        })?,
        node: SlaveNode::new(
            SlaveConfig {
                pairing_timeout_ns: config.pairing_timeout_ns,
                pending_capacity: config.pending_capacity,
                rx_latency_ns: config.rx_latency_ns,
            },
            config.skew_window,
            config.servo.clone(),
            config.beacon_interval_ns,
        )?,
        formed: Default::default(),
        rx_offsets: HashMap::new(),
        sync_dropped: Vec::new(),
        followup_dropped: Vec::new(),
        trace: Vec::new(),
        acct: Accounting::default(),
    };
    run.execute()?;
    Ok(run.finish())
}

impl Run<'_> {
    fn execute(&mut self) -> Result<(), SimError> {
        let cfg = self.config;
        let mut sync_rng = stream_rng(cfg.seed, RngStream::SyncChannel);
        let mut followup_rng = stream_rng(cfg.seed, RngStream::FollowUpChannel);
        let mut drop_rng = stream_rng(cfg.seed, RngStream::SyncDrop);

        let start = TimePointNs(cfg.start_true_ns);
        let end = TimePointNs(cfg.start_true_ns + cfg.duration_ns());
        let first_reading = self.master_clock.value_at(start)?;
        let mut beacon_index: u64 = 0;
        self.schedule(start, EventKind::BeaconEmit, Vec::new());

        let mut now = TimePointNs(0);
        loop {
            let Some(ev) = self.queue.pop() else {
                // tuples still held behind an unpaired SYNC come out at the end
                let held = self.node.flush();
                if held.is_empty() {
                    break;
                }
                for tuple in held {
                    self.tuple_formed(now, tuple);
                }
                continue;
            };
            now = ev.fire_at;
            match ev.kind {
                EventKind::BeaconEmit => {
                    let system = self.master_clock.read(now)?;
                    let tsf = self.master_clock.tsf_read(now)?;
                    let out = self.master.on_beacon(tsf, system)?;
                    self.acct.beacons += 1;

                    let missed = rand::Rng::random::<f64>(&mut drop_rng) < cfg.sync_drop_prob;
                    match (missed, cfg.sync_channel.sample_delay(&mut sync_rng)) {
                        (false, Delivery::Delivered(d)) => {
                            self.schedule(TimePointNs(now.0 + d), EventKind::SyncDeliver, encode(&Message::Sync(out.sync)))
                        }
                        _ => {
                            self.acct.sync_drops += 1;
                            self.sync_dropped.push(out.sync.seq);
                        }
                    }

                    beacon_index += 1;
                    let target = first_reading + (beacon_index * cfg.beacon_interval_ns) as i64;
                    let next = self.master_clock.true_time_for(target);
                    let mut follow_ups: Vec<_> = out.follow_up.into_iter().collect();
                    if next < end {
                        self.schedule(next, EventKind::BeaconEmit, Vec::new());
                    } else {
                        follow_ups.extend(self.master.flush());
                    }
                    for fu in follow_ups {
                        self.acct.followups_sent += 1;
                        match cfg.followup_channel.sample_delay(&mut followup_rng) {
                            Delivery::Delivered(d) => self.schedule(
                                TimePointNs(now.0 + d),
                                EventKind::FollowUpDeliver,
                                encode(&Message::FollowUp(fu)),
                            ),
                            Delivery::Dropped => self.followup_dropped.extend(fu.entries().map(|e| e.seq)),
                        }
                    }
                }
                EventKind::SyncDeliver => {
                    let Ok(Message::Sync(msg)) = decode(&ev.payload) else {
                        unreachable!("simulator only queues valid SYNCs")
                    };
                    let local = cfg.timestamp_source.stamp(&mut self.slave_clock, now)?;
                    let true_offset = self.slave_clock.value_at(now)? - self.master_clock.value_at(now)?;
                    self.rx_offsets.insert(msg.seq, true_offset);
                    for tuple in self.node.on_sync(&msg, local) {
                        self.tuple_formed(now, tuple);
                    }
                }
                EventKind::FollowUpDeliver => {
                    let Ok(Message::FollowUp(msg)) = decode(&ev.payload) else {
                        unreachable!("simulator only queues valid FOLLOW_UPs")
                    };
                    let local = self.slave_clock.read(now)?;
                    for tuple in self.node.on_follow_up(&msg, local) {
                        self.tuple_formed(now, tuple);
                    }
                }
                EventKind::ServoTick => {
                    let tuple = self.formed.pop_front().expect("one tuple per servo tick");
                    self.servo_tick(now, tuple)?;
                }
            }
        }
        Ok(())
    }

    fn schedule(&mut self, fire_at: TimePointNs, kind: EventKind, payload: Vec<u8>) {
        self.queue.push(SimEvent { fire_at, kind, payload });
    }

    fn tuple_formed(&mut self, now: TimePointNs, tuple: TimestampTuple) {
        self.formed.push_back(tuple);
        self.schedule(now, EventKind::ServoTick, Vec::new());
    }

    fn servo_tick(&mut self, now: TimePointNs, tuple: TimestampTuple) -> Result<(), SimError> {
        let processed = match self.node.handle_tuple(tuple) {
            TupleOutcome::Estimated(p) => p,
            TupleOutcome::Discarded(_) => {
                self.acct.estimator_discards += 1;
                return Ok(());
            }
            TupleOutcome::Fault(_) => {
                self.acct.session_faults += 1;
                return Ok(());
            }
        };
        if let Some(action) = processed.action {
            apply_action_since(&mut self.slave_clock, action, now, processed.rx_local_ns)?;
        }
        let est = processed.estimate;
        self.trace.push(
            TraceRecord {
                true_time_ns: Some(now.0),
                seq: tuple.seq,
                t_master_ns: tuple.t_master_ns.0,
                t_slave_ns: tuple.t_slave_ns.0,
                offset_ns: est.offset_ns,
                skew_ppm: est.skew_ppm,
                window_skew_ppm: est.window_skew_ppm,
                dropped_since_last: est.dropped_since_last,
                servo_phase: processed.phase,
                servo_output_ppb: self.slave_clock.freq_adj_ppb(),
                disciplined_offset_ns: self.rx_offsets.remove(&tuple.seq),
            }
            .quantized(),
        );
        Ok(())
    }

    fn finish(self) -> SimOutcome {
        let mut acct = self.acct;
        let counters = self.node.counters();
        acct.tuples = counters.tuples;
        acct.slave_unpaired = counters.pending_expired + counters.pending_evicted;
        acct.followups_unmatched = counters.followups_unmatched;

        let mut sync_dropped = self.sync_dropped;
        sync_dropped.sort_unstable();
        acct.followup_losses = self
            .followup_dropped
            .iter()
            .filter(|s| sync_dropped.binary_search(s).is_err())
            .count() as u64;
        acct.pairing_expiries = acct.slave_unpaired.saturating_sub(acct.followup_losses);

        let offsets: Vec<f64> = self
            .trace
            .iter()
            .filter_map(|r| r.disciplined_offset_ns.map(|v| v as f64))
            .collect();
        SimOutcome {
            increments: self.node.estimator().raw_increment_series().to_vec(),
            trace: self.trace,
            accounting: acct,
            offset_stats: compute_stats(&offsets).ok(),
        }
    }
}

/// Result of a simulated request/response latency measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct RttReport {
    pub channel: ChannelModel,
    pub probes: usize,
    pub lost: usize,
    /// RTT statistics in milliseconds.
    pub rtt_ms: SummaryMetrics,
}

/// Sends `probes` request/response pairs over `channel`; each RTT is the sum
/// of two independent one-way draws.
pub fn rtt_bench(channel: &ChannelModel, probes: usize, seed: u64) -> Result<RttReport, SimError> {
    if probes < 2 {
        return Err(SimError::InvalidConfig(format!("need at least 2 probes, got {probes}")));
    }
    channel.validate().map_err(|e| SimError::Channel("probe", e))?;
    let mut rng = stream_rng(seed, RngStream::Probe);
    let mut rtts = Vec::with_capacity(probes);
    let mut lost = 0;
    for _ in 0..probes {
        let request = channel.sample_delay(&mut rng);
        let response = channel.sample_delay(&mut rng);
        match (request, response) {
            (Delivery::Delivered(a), Delivery::Delivered(b)) => rtts.push((a + b) as f64 / 1e6),
            _ => lost += 1,
        }
    }
    let rtt_ms = compute_stats(&rtts)
        .map_err(|e| SimError::InvalidConfig(format!("too few probes survived the channel: {e}")))?;
    Ok(RttReport {
        channel: *channel,
        probes,
        lost,
        rtt_ms,
    })
}
