//! Link delay models and the measured link presets.
//!
//! Each preset stores the measured round-trip mean and standard deviation.
//! The one-way model used for a single message halves the mean and divides the
//! standard deviation by sqrt(2), so the sum of two independent one-way draws
//! has exactly the measured RTT mean and variance. Presets use a Gamma
//! distribution: it is non-negative, right-skewed like real Wi-Fi latency, and
//! a sum of two Gamma draws with a common scale is again Gamma.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, Normal};
use thiserror::Error;

pub const DEFAULT_MIN_DELAY_NS: u64 = 1_000;

/// Independent random streams. Every consumer of randomness in a simulation
/// owns one, so changing one channel never perturbs another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum RngStream {
    SyncChannel = 1,
    FollowUpChannel = 2,
    SyncDrop = 3,
    Probe = 4,
}

/// ChaCha20 seeded from `seed` and positioned on `stream`.
pub fn stream_rng(seed: u64, stream: RngStream) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DelayDistribution {
    Fixed,
    Gaussian,
    Uniform,
    /// Moment-matched Gamma (shape = (mean/sigma)^2, scale = sigma^2/mean).
    Gamma,
}

impl DelayDistribution {
    pub fn as_str(self) -> &'static str {
        match self {
            DelayDistribution::Fixed => "fixed",
            DelayDistribution::Gaussian => "gaussian",
            DelayDistribution::Uniform => "uniform",
            DelayDistribution::Gamma => "gamma",
        }
    }
}

impl FromStr for DelayDistribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(DelayDistribution::Fixed),
            "gaussian" => Ok(DelayDistribution::Gaussian),
            "uniform" => Ok(DelayDistribution::Uniform),
            "gamma" => Ok(DelayDistribution::Gamma),
            other => Err(format!("unknown distribution `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("drop probability {0} outside [0, 1]")]
    DropProb(f64),
    #[error("gamma channel needs a positive mean")]
    GammaMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelModel {
    pub mean_delay_ns: u64,
    pub sigma_ns: u64,
    pub distribution: DelayDistribution,
    pub drop_prob: f64,
    /// Draws below this are clamped up to it.
    pub min_delay_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Delivered(u64),
    Dropped,
}

impl ChannelModel {
    pub fn fixed(delay_ns: u64) -> Self {
        ChannelModel {
            mean_delay_ns: delay_ns,
            sigma_ns: 0,
            distribution: DelayDistribution::Fixed,
            drop_prob: 0.0,
            min_delay_ns: DEFAULT_MIN_DELAY_NS.min(delay_ns),
        }
    }

    pub fn gaussian(mean_ns: u64, sigma_ns: u64) -> Self {
        ChannelModel {
            mean_delay_ns: mean_ns,
            sigma_ns,
            distribution: DelayDistribution::Gaussian,
            drop_prob: 0.0,
            min_delay_ns: DEFAULT_MIN_DELAY_NS,
        }
    }

    pub fn with_drop_prob(mut self, p: f64) -> Self {
        self.drop_prob = p;
        self
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(ChannelError::DropProb(self.drop_prob));
        }
        if self.distribution == DelayDistribution::Gamma && self.sigma_ns > 0 && self.mean_delay_ns == 0 {
            return Err(ChannelError::GammaMean);
        }
        Ok(())
    }

    /// Draws the drop decision, then the delay. One uniform draw for the drop
    /// decision is always consumed.
    pub fn sample_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> Delivery {
        let u: f64 = rng.random();
        if u < self.drop_prob {
            return Delivery::Dropped;
        }
        let mean = self.mean_delay_ns as f64;
        let sigma = self.sigma_ns as f64;
        let raw = if self.sigma_ns == 0 {
            mean
        } else {
            match self.distribution {
                DelayDistribution::Fixed => mean,
                DelayDistribution::Gaussian => Normal::new(mean, sigma).expect("finite sigma").sample(rng),
                DelayDistribution::Uniform => {
                    let half = sigma * 3f64.sqrt();
                    mean - half + 2.0 * half * rng.random::<f64>()
                }
                DelayDistribution::Gamma => {
                    let shape = (mean / sigma).powi(2);
                    let scale = sigma * sigma / mean;
                    Gamma::new(shape, scale).expect("positive gamma parameters").sample(rng)
                }
            }
        };
        let delay = raw.round().max(self.min_delay_ns as f64);
        Delivery::Delivered(delay as u64)
    }
}

/// Measured round-trip latency of one link type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkPreset {
    Bss24Ghz,
    Bss5Ghz,
    AdHoc24Ghz,
    Ethernet,
}

impl LinkPreset {
    pub const ALL: [LinkPreset; 4] = [
        LinkPreset::Bss24Ghz,
        LinkPreset::Bss5Ghz,
        LinkPreset::AdHoc24Ghz,
        LinkPreset::Ethernet,
    ];

    /// RTT mean and standard deviation in ms.
    pub fn rtt_ms(self) -> (f64, f64) {
        match self {
            LinkPreset::Bss24Ghz => (3.19, 1.80),
            LinkPreset::Bss5Ghz => (2.67, 0.64),
            LinkPreset::AdHoc24Ghz => (0.87, 0.93),
            LinkPreset::Ethernet => (0.45, 0.05),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LinkPreset::Bss24Ghz => "BSS (2.4 GHz)",
            LinkPreset::Bss5Ghz => "BSS (5 GHz)",
            LinkPreset::AdHoc24Ghz => "Ad hoc (2.4 GHz)",
            LinkPreset::Ethernet => "Ethernet",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            LinkPreset::Bss24Ghz => "bss-2.4ghz",
            LinkPreset::Bss5Ghz => "bss-5ghz",
            LinkPreset::AdHoc24Ghz => "adhoc-2.4ghz",
            LinkPreset::Ethernet => "ethernet",
        }
    }

    fn model(mean_ms: f64, sigma_ms: f64) -> ChannelModel {
        ChannelModel {
            mean_delay_ns: (mean_ms * 1e6).round() as u64,
            sigma_ns: (sigma_ms * 1e6).round() as u64,
            distribution: DelayDistribution::Gamma,
            drop_prob: 0.0,
            min_delay_ns: DEFAULT_MIN_DELAY_NS,
        }
    }

    /// The measured RTT used directly as a one-way delay.
    pub fn rtt_model(self) -> ChannelModel {
        let (m, s) = self.rtt_ms();
        Self::model(m, s)
    }

    /// One-way delay whose round trip reproduces the measured RTT.
    pub fn one_way(self) -> ChannelModel {
        let (m, s) = self.rtt_ms();
        Self::model(m / 2.0, s / std::f64::consts::SQRT_2)
    }
}

impl fmt::Display for LinkPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for LinkPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LinkPreset::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| format!("unknown link preset `{s}`"))
    }
}
