//! The slave processing chain shared by the simulator and the UDP daemon:
//! pairing, estimation and the servo. Only the time source and the transport
//! differ between the two.
//!
//! The servo only sees samples whose SYNC was timestamped after the most
//! recent clock adjustment. Older samples are still estimated and traced but
//! would make the servo correct the same error twice.

use std::collections::BTreeMap;

use crate::clock::{ClockError, SimulatedClock, TimePointNs};
use crate::estimator::{Discard, Estimator, EstimatorError, SyncEstimate, TimestampTuple};
use crate::protocol::{FollowUpMessage, SlaveConfig, SlaveCounters, SlaveSession, SyncMessage};
use crate::servo::{ClockServo, PiServo, ServoAction, ServoConfig, ServoError, ServoPhase};

#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    pub estimate: SyncEstimate,
    pub action: Option<ServoAction>,
    pub phase: Option<ServoPhase>,
    /// The SYNC predates the latest clock adjustment, so the servo skipped it.
    pub stale: bool,
    /// Local clock reading when the SYNC arrived (before latency compensation).
    pub rx_local_ns: TimePointNs,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TupleOutcome {
    Estimated(Processed),
    Discarded(Discard),
    Fault(EstimatorError),
}

#[derive(Debug, Clone)]
pub struct SlaveNode {
    session: SlaveSession,
    estimator: Estimator,
    servo: Option<PiServo>,
    nominal_interval_ns: u64,
    /// Bumped whenever an action is handed out.
    adjustments: u64,
    /// Adjustment count at reception, per pending SYNC seq.
    sync_epochs: BTreeMap<u32, u64>,
    epoch_capacity: usize,
    last_servo_master_ns: Option<u64>,
}

impl SlaveNode {
    /// `servo = None` runs estimation only.
    pub fn new(
        slave: SlaveConfig,
        skew_window: usize,
        servo: Option<ServoConfig>,
        nominal_interval_ns: u64,
    ) -> Result<Self, ServoError> {
        if nominal_interval_ns == 0 {
            return Err(ServoError::ZeroInterval);
        }
        let epoch_capacity = 2 * slave.pending_capacity.max(1);
        Ok(SlaveNode {
            session: SlaveSession::new(slave),
            estimator: Estimator::new(skew_window),
            servo: servo.map(PiServo::new).transpose()?,
            nominal_interval_ns,
            adjustments: 0,
            sync_epochs: BTreeMap::new(),
            epoch_capacity,
            last_servo_master_ns: None,
        })
    }

    pub fn session(&self) -> &SlaveSession {
        &self.session
    }

    pub fn counters(&self) -> SlaveCounters {
        self.session.counters()
    }

    pub fn estimator(&self) -> &Estimator {
        &self.estimator
    }

    pub fn servo(&self) -> Option<&PiServo> {
        self.servo.as_ref()
    }

    pub fn on_sync(&mut self, msg: &SyncMessage, local_time_ns: TimePointNs) -> Vec<TimestampTuple> {
        // first reception wins, like the session's duplicate policy
        self.sync_epochs.entry(msg.seq).or_insert(self.adjustments);
        while self.sync_epochs.len() > self.epoch_capacity {
            self.sync_epochs.pop_first();
        }
        self.session.on_sync(msg, local_time_ns)
    }

    pub fn on_follow_up(&mut self, msg: &FollowUpMessage, local_time_ns: TimePointNs) -> Vec<TimestampTuple> {
        self.session.on_follow_up(msg, local_time_ns)
    }

    pub fn flush(&mut self) -> Vec<TimestampTuple> {
        self.session.flush()
    }

    /// Runs one tuple through the estimator and, if enabled, the servo. The
    /// caller must apply a returned action before the next SYNC is stamped.
    pub fn handle_tuple(&mut self, tuple: TimestampTuple) -> TupleOutcome {
        let epoch = self.sync_epochs.remove(&tuple.seq);
        let estimate = match self.estimator.update(tuple) {
            Err(fault) => return TupleOutcome::Fault(fault),
            Ok(Err(discard)) => return TupleOutcome::Discarded(discard),
            Ok(Ok(estimate)) => estimate,
        };
        let stale = epoch.is_some_and(|e| e < self.adjustments);
        let rx_local_ns = TimePointNs(
            (tuple.t_slave_ns.0 as i128 + self.session.config().rx_latency_ns as i128).clamp(0, u64::MAX as i128) as u64,
        );
        let Some(servo) = self.servo.as_mut() else {
            return TupleOutcome::Estimated(Processed {
                estimate,
                action: None,
                phase: None,
                stale,
                rx_local_ns,
            });
        };
        let master_ns = tuple.t_master_ns.0;
        let action = if stale {
            None
        } else {
            let interval = match self.last_servo_master_ns {
                Some(prev) if master_ns > prev => master_ns - prev,
                _ => self.nominal_interval_ns,
            };
            self.last_servo_master_ns = Some(master_ns);
            self.adjustments += 1;
            Some(servo.sample(estimate.offset_ns, interval).expect("interval is positive"))
        };
        TupleOutcome::Estimated(Processed {
            estimate,
            action,
            phase: Some(servo.phase()),
            stale,
            rx_local_ns,
        })
    }
}

/// Applies a servo action to a clock at `now`.
pub fn apply_action(clock: &mut SimulatedClock, action: ServoAction, now: TimePointNs) -> Result<(), ClockError> {
    match action {
        ServoAction::Step(delta) => clock.step(delta, now, true),
        ServoAction::SetFreq(ppb) => clock.set_freq(ppb, now).map(|_| ()),
    }
}

/// Applies a servo action at `now` for a sample taken at local time
/// `sampled_local`. A frequency change also moves the phase by what the new
/// rate would have added since the sample, so the result matches applying it
/// at sampling time.
pub fn apply_action_since(
    clock: &mut SimulatedClock,
    action: ServoAction,
    now: TimePointNs,
    sampled_local: TimePointNs,
) -> Result<(), ClockError> {
    let ServoAction::SetFreq(ppb) = action else {
        return apply_action(clock, action, now);
    };
    let before = clock.freq_adj_ppb();
    let applied = clock.set_freq(ppb, now)?.applied_ppb;
    let lag_ns = clock.value_at(now)? - sampled_local.0 as i64;
    if lag_ns > 0 {
        let catch_up = ((applied - before) as f64 * lag_ns as f64 / 1e9).round() as i64;
        if catch_up != 0 {
            clock.step(catch_up, now, true)?;
        }
    }
    Ok(())
}
