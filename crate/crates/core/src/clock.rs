//! Clock models: true time, drifting local clocks and the 1 MHz TSF counter.
//!
//! A [`SimulatedClock`] is evaluated piecewise-linearly. Every adjustment
//! (step or frequency change) closes the current segment and opens a new one
//! anchored at the adjustment instant, so a value that has already been read
//! is never rewritten by a later adjustment. Fractional nanoseconds are
//! rounded half away from zero, once per read, relative to the segment anchor.

use std::fmt;

use thiserror::Error;

/// Largest accepted oscillator error, in ppm.
pub const MAX_SKEW_PPM: f64 = 1000.0;

/// Default clamp for servo frequency corrections, in ppb.
pub const DEFAULT_MAX_FREQ_PPB: i64 = 500_000;

const NS_PER_US: u64 = 1_000;

/// A clock reading (or a true-time instant) in nanoseconds since an arbitrary epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TimePointNs(pub u64);

impl TimePointNs {
    pub const fn from_secs(secs: u64) -> Self {
        TimePointNs(secs * 1_000_000_000)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    /// Signed difference `self - earlier` in nanoseconds.
    pub fn signed_since(self, earlier: TimePointNs) -> i64 {
        self.0.wrapping_sub(earlier.0) as i64
    }
}

impl fmt::Display for TimePointNs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

/// Value of a 64-bit, 1 MHz TSF counter. Wraparound takes >500k years and is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TsfTimestamp(pub u64);

impl TsfTimestamp {
    /// Truncates a nanosecond reading to whole microseconds.
    pub const fn from_clock_ns(ns: TimePointNs) -> Self {
        TsfTimestamp(ns.0 / NS_PER_US)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub const fn to_ns(self) -> TimePointNs {
        TimePointNs(self.0 * NS_PER_US)
    }
}

impl fmt::Display for TsfTimestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClockError {
    #[error("clock accessed at true time {requested} after it was already used at {last}")]
    NonMonotonic { last: u64, requested: u64 },
    #[error("skew {0} ppm exceeds the +/-{MAX_SKEW_PPM} ppm sanity bound")]
    SkewOutOfRange(f64),
    #[error("backward step of {0} ns requires explicit permission")]
    BackwardStep(i64),
    #[error("clock value {0} ns is before the epoch")]
    BeforeEpoch(i64),
}

/// Which counter a node uses to timestamp SYNC events.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TimestampSource {
    /// The microsecond TSF counter, converted to ns at the protocol boundary.
    #[default]
    Tsf,
    /// The nanosecond system clock.
    System,
}

impl TimestampSource {
    pub fn stamp(self, clock: &mut SimulatedClock, true_now: TimePointNs) -> Result<TimePointNs, ClockError> {
        match self {
            TimestampSource::Tsf => Ok(clock.tsf_read(true_now)?.to_ns()),
            TimestampSource::System => clock.read(true_now),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TimestampSource::Tsf => "tsf",
            TimestampSource::System => "system",
        }
    }
}

impl std::str::FromStr for TimestampSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsf" => Ok(TimestampSource::Tsf),
            "system" => Ok(TimestampSource::System),
            other => Err(format!("unknown timestamp source `{other}` (expected tsf or system)")),
        }
    }
}

/// Outcome of [`SimulatedClock::set_freq`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreqUpdate {
    pub applied_ppb: i64,
    pub saturated: bool,
}

/// A free-running oscillator with a constant frequency error plus an
/// adjustable correction.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedClock {
    offset_ns: i64,
    skew_ppm: f64,
    freq_adj_ppb: i64,
    max_freq_ppb: i64,
    saturated: bool,
    base_true_ns: u64,
    base_value_ns: i64,
    last_true_ns: u64,
}

impl SimulatedClock {
    /// Creates a clock that reads `offset_ns` at true time zero.
    pub fn new(offset_ns: i64, skew_ppm: f64) -> Result<Self, ClockError> {
        if !skew_ppm.is_finite() || skew_ppm.abs() > MAX_SKEW_PPM {
            return Err(ClockError::SkewOutOfRange(skew_ppm));
        }
        Ok(SimulatedClock {
            offset_ns,
            skew_ppm,
            freq_adj_ppb: 0,
            max_freq_ppb: DEFAULT_MAX_FREQ_PPB,
            saturated: false,
            base_true_ns: 0,
            base_value_ns: offset_ns,
            last_true_ns: 0,
        })
    }

    /// A perfect clock: zero offset, zero skew.
    pub fn ideal() -> Self {
        Self::new(0, 0.0).expect("zero skew is in range")
    }

    pub fn with_max_freq_ppb(mut self, max_freq_ppb: i64) -> Self {
        self.max_freq_ppb = max_freq_ppb.abs();
        self
    }

    pub fn offset_ns(&self) -> i64 {
        self.offset_ns
    }

    pub fn skew_ppm(&self) -> f64 {
        self.skew_ppm
    }

    pub fn freq_adj_ppb(&self) -> i64 {
        self.freq_adj_ppb
    }

    /// True if the most recent frequency request was clamped.
    pub fn saturated(&self) -> bool {
        self.saturated
    }

    /// Current rate error relative to true time, in ppb.
    pub fn rate_error_ppb(&self) -> f64 {
        self.skew_ppm * 1e3 + self.freq_adj_ppb as f64
    }

    /// Rate error in units of 1e-6 ppm (1e-12), the resolution used for reads.
    fn rate_error_fine(&self) -> i128 {
        (self.skew_ppm * 1e6).round() as i128 + self.freq_adj_ppb as i128 * 1_000
    }

    fn check_order(&self, true_now: TimePointNs) -> Result<(), ClockError> {
        if true_now.0 < self.last_true_ns {
            return Err(ClockError::NonMonotonic {
                last: self.last_true_ns,
                requested: true_now.0,
            });
        }
        Ok(())
    }

    /// Signed clock value at `true_now` without recording the access.
    ///
    /// Only instants inside the current segment can be evaluated.
    pub fn value_at(&self, true_now: TimePointNs) -> Result<i64, ClockError> {
        if true_now.0 < self.base_true_ns {
            return Err(ClockError::NonMonotonic {
                last: self.base_true_ns,
                requested: true_now.0,
            });
        }
        let elapsed = true_now.0 - self.base_true_ns;
        let drift = div_round_half_away(elapsed as i128 * self.rate_error_fine(), 1_000_000_000_000);
        Ok(self.base_value_ns + elapsed as i64 + drift as i64)
    }

    /// Reads the clock at `true_now`.
    pub fn read(&mut self, true_now: TimePointNs) -> Result<TimePointNs, ClockError> {
        self.check_order(true_now)?;
        let value = self.value_at(true_now)?;
        if value < 0 {
            return Err(ClockError::BeforeEpoch(value));
        }
        self.last_true_ns = true_now.0;
        Ok(TimePointNs(value as u64))
    }

    /// Reads the clock as a TSF counter (truncating to whole microseconds).
    pub fn tsf_read(&mut self, true_now: TimePointNs) -> Result<TsfTimestamp, ClockError> {
        self.read(true_now).map(TsfTimestamp::from_clock_ns)
    }

    /// Shifts every subsequent reading by `delta_ns`.
    pub fn step(&mut self, delta_ns: i64, true_now: TimePointNs, allow_backward: bool) -> Result<(), ClockError> {
        self.check_order(true_now)?;
        if delta_ns < 0 && !allow_backward {
            return Err(ClockError::BackwardStep(delta_ns));
        }
        let value = self.value_at(true_now)?;
        self.base_true_ns = true_now.0;
        self.base_value_ns = value + delta_ns;
        self.last_true_ns = true_now.0;
        Ok(())
    }

    /// Replaces the frequency correction from `true_now` onward. The value at
    /// `true_now` is continuous. Requests beyond the clamp are saturated.
    pub fn set_freq(&mut self, adj_ppb: i64, true_now: TimePointNs) -> Result<FreqUpdate, ClockError> {
        self.check_order(true_now)?;
        let value = self.value_at(true_now)?;
        let applied = adj_ppb.clamp(-self.max_freq_ppb, self.max_freq_ppb);
        self.saturated = applied != adj_ppb;
        self.freq_adj_ppb = applied;
        self.base_true_ns = true_now.0;
        self.base_value_ns = value;
        self.last_true_ns = true_now.0;
        Ok(FreqUpdate {
            applied_ppb: applied,
            saturated: self.saturated,
        })
    }

    /// Earliest true time in the current segment at which the clock reads at
    /// least `target_ns`. The current rate must stay positive (guaranteed by the
    /// skew and correction bounds).
    pub fn true_time_for(&self, target_ns: i64) -> TimePointNs {
        let rate = 1.0 + self.rate_error_ppb() / 1e9;
        let span = (target_ns - self.base_value_ns) as f64 / rate;
        let mut t = self.base_true_ns.saturating_add(span.max(0.0).floor() as u64);
        let reads = |t: u64| self.value_at(TimePointNs(t)).expect("t within segment");
        while t > self.base_true_ns && reads(t - 1) >= target_ns {
            t -= 1;
        }
        while reads(t) < target_ns {
            t += 1;
        }
        TimePointNs(t)
    }
}

/// `n / d` rounded to the nearest integer, ties away from zero. `d > 0`.
pub fn div_round_half_away(n: i128, d: i128) -> i128 {
    let q = n / d;
    let r = n % d;
    if 2 * r.abs() >= d {
        q + n.signum()
    } else {
        q
    }
}
