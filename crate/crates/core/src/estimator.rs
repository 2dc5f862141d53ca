//! Offset and skew estimation from paired master/slave timestamps.
//!
//! Offset is the slave timestamp minus the master timestamp of the same SYNC
//! event. Skew is the change in offset divided by the change in master time
//! between two consecutive accepted events, which stays correct across
//! dropped SYNCs because the master time gap grows with the offset gap.
//!
//! A sliding-window least-squares slope of offset against master time gives a
//! filtered skew. Everything is integer arithmetic except the final division.

use std::collections::VecDeque;

use thiserror::Error;

use crate::clock::TimePointNs;

pub const DEFAULT_WINDOW: usize = 64;

/// One SYNC event as seen by master and slave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TimestampTuple {
    pub seq: u32,
    pub t_master_ns: TimePointNs,
    pub t_slave_ns: TimePointNs,
}

/// Estimator output for one accepted tuple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncEstimate {
    pub seq: u32,
    pub offset_ns: i64,
    /// Instantaneous skew between this tuple and its predecessor.
    pub skew_ppm: f64,
    /// Least-squares skew over the window.
    pub window_skew_ppm: f64,
    pub dropped_since_last: u16,
    pub valid_skew: bool,
    /// Master time elapsed since the previous accepted tuple (0 for the first).
    pub interval_ns: u64,
}

/// Per-tuple offset change, with the seq gap it spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OffsetIncrement {
    pub seq: u32,
    pub seq_gap: u32,
    pub delta_offset_ns: i64,
    pub delta_master_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EstimatorError {
    #[error("master time did not advance: {prev} -> {curr}")]
    MasterTimeRegression { prev: u64, curr: u64 },
}

/// Why a tuple was not accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Discard {
    Duplicate,
    OutOfOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EstimatorCounters {
    pub accepted: u64,
    pub duplicates: u64,
    pub out_of_order: u64,
}

/// Offset of the slave relative to the master for one SYNC event.
pub fn compute_offset(tuple: &TimestampTuple) -> i64 {
    let diff = tuple.t_slave_ns.0 as i128 - tuple.t_master_ns.0 as i128;
    assert!(
        i64::try_from(diff).is_ok(),
        "offset overflow: slave={} master={}",
        tuple.t_slave_ns,
        tuple.t_master_ns
    );
    diff as i64
}

/// Skew in ppm between two offset samples taken at two master times.
pub fn compute_skew(
    prev_offset_ns: i64,
    curr_offset_ns: i64,
    prev_t_master: TimePointNs,
    curr_t_master: TimePointNs,
) -> Result<f64, EstimatorError> {
    if curr_t_master <= prev_t_master {
        return Err(EstimatorError::MasterTimeRegression {
            prev: prev_t_master.0,
            curr: curr_t_master.0,
        });
    }
    let d_offset = curr_offset_ns as i128 - prev_offset_ns as i128;
    let d_master = (curr_t_master.0 - prev_t_master.0) as i128;
    Ok(d_offset as f64 / d_master as f64 * 1e6)
}

/// Least-squares slope of `offset` against `t_master`, in ppm.
///
/// Sums are taken relative to the first sample so they stay within i128.
fn least_squares_ppm(samples: &VecDeque<(u64, i64)>) -> Option<f64> {
    let n = samples.len() as i128;
    if n < 2 {
        return None;
    }
    let (x0, y0) = samples[0];
    let (mut sx, mut sy, mut sxx, mut sxy) = (0i128, 0i128, 0i128, 0i128);
    for &(x, y) in samples {
        let x = (x - x0) as i128;
        let y = (y - y0) as i128;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let den = n * sxx - sx * sx;
    if den == 0 {
        return None;
    }
    let num = n * sxy - sx * sy;
    Some(num as f64 / den as f64 * 1e6)
}

#[derive(Debug, Clone, Copy)]
struct Accepted {
    seq: u32,
    t_master: TimePointNs,
    offset_ns: i64,
}

/// Per-session estimator. Tuples must arrive in strictly increasing seq order;
/// anything else is discarded and counted.
#[derive(Debug, Clone)]
pub struct Estimator {
    window_len: usize,
    window: VecDeque<(u64, i64)>,
    last: Option<Accepted>,
    increments: Vec<OffsetIncrement>,
    counters: EstimatorCounters,
}

impl Default for Estimator {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW)
    }
}

impl Estimator {
    pub fn new(window_len: usize) -> Self {
        assert!(window_len >= 2, "skew window needs at least two samples");
        Estimator {
            window_len,
            window: VecDeque::with_capacity(window_len),
            last: None,
            increments: Vec::new(),
            counters: EstimatorCounters::default(),
        }
    }

    pub fn counters(&self) -> EstimatorCounters {
        self.counters
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// Feeds one tuple. `Ok(Err(_))` means the tuple was discarded.
    pub fn update(&mut self, tuple: TimestampTuple) -> Result<Result<SyncEstimate, Discard>, EstimatorError> {
        let offset_ns = compute_offset(&tuple);

        let Some(prev) = self.last else {
            self.accept(&tuple, offset_ns);
            return Ok(Ok(SyncEstimate {
                seq: tuple.seq,
                offset_ns,
                skew_ppm: 0.0,
                window_skew_ppm: 0.0,
                dropped_since_last: 0,
                valid_skew: false,
                interval_ns: 0,
            }));
        };

        if tuple.seq == prev.seq {
            self.counters.duplicates += 1;
            return Ok(Err(Discard::Duplicate));
        }
        if tuple.seq < prev.seq {
            self.counters.out_of_order += 1;
            return Ok(Err(Discard::OutOfOrder));
        }
        let skew_ppm = compute_skew(prev.offset_ns, offset_ns, prev.t_master, tuple.t_master_ns)?;

        let seq_gap = tuple.seq - prev.seq;
        let delta_master_ns = tuple.t_master_ns.0 - prev.t_master.0;
        self.increments.push(OffsetIncrement {
            seq: tuple.seq,
            seq_gap,
            delta_offset_ns: offset_ns - prev.offset_ns,
            delta_master_ns,
        });
        self.accept(&tuple, offset_ns);
        let window_skew_ppm = least_squares_ppm(&self.window).unwrap_or(skew_ppm);

        Ok(Ok(SyncEstimate {
            seq: tuple.seq,
            offset_ns,
            skew_ppm,
            window_skew_ppm,
            dropped_since_last: u16::try_from(seq_gap - 1).unwrap_or(u16::MAX),
            valid_skew: true,
            interval_ns: delta_master_ns,
        }))
    }

    fn accept(&mut self, tuple: &TimestampTuple, offset_ns: i64) {
        if self.window.len() == self.window_len {
            self.window.pop_front();
        }
        self.window.push_back((tuple.t_master_ns.0, offset_ns));
        self.last = Some(Accepted {
            seq: tuple.seq,
            t_master: tuple.t_master_ns,
            offset_ns,
        });
        self.counters.accepted += 1;
    }

    /// Offset increments of every accepted tuple after the first.
    pub fn raw_increment_series(&self) -> &[OffsetIncrement] {
        &self.increments
    }
}
