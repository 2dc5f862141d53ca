//! Clock correction servo.
//!
//! The first sample (and any sample whose offset exceeds the step threshold)
//! produces a phase step. After that a PI controller turns each offset into an
//! absolute frequency correction. Offsets are normalized to ppb over the
//! sampling interval, so the gains are dimensionless and independent of the
//! beacon period:
//!
//! ```text
//! offset_ppb = offset_ns * 1e9 / interval_ns
//! integral  += ki * offset_ppb            (clamped to +/- max_freq_ppb)
//! output     = -(kp * offset_ppb + integral)   (clamped to +/- max_freq_ppb)
//! ```

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct ServoConfig {
    pub kp: f64,
    pub ki: f64,
    pub step_threshold_ns: u64,
    pub max_freq_ppb: u64,
    pub lock_threshold_ns: u64,
    pub lock_count: u32,
}

impl Default for ServoConfig {
    fn default() -> Self {
        ServoConfig {
            kp: 0.7,
            ki: 0.3,
            step_threshold_ns: 10_000_000,
            max_freq_ppb: 500_000,
            lock_threshold_ns: 50_000,
            lock_count: 5,
        }
    }
}

impl ServoConfig {
    pub fn validate(&self) -> Result<(), ServoError> {
        if !(self.kp > 0.0 && self.kp.is_finite()) {
            return Err(ServoError::InvalidConfig(format!("kp must be > 0, got {}", self.kp)));
        }
        if !(self.ki >= 0.0 && self.ki.is_finite()) {
            return Err(ServoError::InvalidConfig(format!("ki must be >= 0, got {}", self.ki)));
        }
        if self.lock_count == 0 {
            return Err(ServoError::InvalidConfig("lock_count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServoError {
    #[error("sampling interval must be positive")]
    ZeroInterval,
    #[error("invalid servo configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ServoPhase {
    Init,
    Stepping,
    Tracking,
    Locked,
}

impl ServoPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            ServoPhase::Init => "init",
            ServoPhase::Stepping => "stepping",
            ServoPhase::Tracking => "tracking",
            ServoPhase::Locked => "locked",
        }
    }
}

impl fmt::Display for ServoPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ServoPhase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "init" => Ok(ServoPhase::Init),
            "stepping" => Ok(ServoPhase::Stepping),
            "tracking" => Ok(ServoPhase::Tracking),
            "locked" => Ok(ServoPhase::Locked),
            other => Err(format!("unknown servo phase `{other}`")),
        }
    }
}

/// Correction the caller must apply to the disciplined clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServoAction {
    /// Shift the clock by this many nanoseconds.
    Step(i64),
    /// Set the absolute frequency correction, in ppb.
    SetFreq(i64),
}

/// Anything that turns offset samples into clock corrections.
pub trait ClockServo {
    fn sample(&mut self, offset_ns: i64, interval_ns: u64) -> Result<ServoAction, ServoError>;
    fn reset(&mut self);
    fn phase(&self) -> ServoPhase;
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServoState {
    pub phase: ServoPhase,
    pub integral_ppb: f64,
    pub consecutive_in_lock: u32,
    pub last_output_ppb: i64,
}

impl Default for ServoState {
    fn default() -> Self {
        ServoState {
            phase: ServoPhase::Init,
            integral_ppb: 0.0,
            consecutive_in_lock: 0,
            last_output_ppb: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PiServo {
    config: ServoConfig,
    state: ServoState,
}

impl PiServo {
    pub fn new(config: ServoConfig) -> Result<Self, ServoError> {
        config.validate()?;
        Ok(PiServo {
            config,
            state: ServoState::default(),
        })
    }

    pub fn config(&self) -> &ServoConfig {
        &self.config
    }

    pub fn state(&self) -> &ServoState {
        &self.state
    }

    fn update_lock(&mut self, offset_ns: i64) {
        let st = &mut self.state;
        if offset_ns.unsigned_abs() <= self.config.lock_threshold_ns {
            st.consecutive_in_lock = st.consecutive_in_lock.saturating_add(1);
            if st.consecutive_in_lock >= self.config.lock_count {
                st.phase = ServoPhase::Locked;
            }
        } else {
            st.consecutive_in_lock = 0;
            st.phase = ServoPhase::Tracking;
        }
    }
}

impl ClockServo for PiServo {
    fn sample(&mut self, offset_ns: i64, interval_ns: u64) -> Result<ServoAction, ServoError> {
        if interval_ns == 0 {
            return Err(ServoError::ZeroInterval);
        }
        if self.state.phase == ServoPhase::Init || offset_ns.unsigned_abs() > self.config.step_threshold_ns {
            self.state.integral_ppb = 0.0;
            self.state.consecutive_in_lock = 0;
            self.state.phase = ServoPhase::Stepping;
            return Ok(ServoAction::Step(-offset_ns));
        }
        if self.state.phase == ServoPhase::Stepping {
            self.state.phase = ServoPhase::Tracking;
        }

        let limit = self.config.max_freq_ppb as f64;
        let offset_ppb = offset_ns as f64 * 1e9 / interval_ns as f64;
        self.state.integral_ppb = (self.state.integral_ppb + self.config.ki * offset_ppb).clamp(-limit, limit);
        let output = (-(self.config.kp * offset_ppb + self.state.integral_ppb)).clamp(-limit, limit);
        let output = output.round() as i64;

        self.state.last_output_ppb = output;
        self.update_lock(offset_ns);
        Ok(ServoAction::SetFreq(output))
    }

    fn reset(&mut self) {
        self.state = ServoState::default();
    }

    fn phase(&self) -> ServoPhase {
        self.state.phase
    }
}
