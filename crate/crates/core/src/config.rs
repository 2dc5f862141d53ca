//! Flat `key = value` configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored. Keys
//! may appear only once and every key must be known to the subcommand reading
//! the file. See the README for the full key reference.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::net::IpAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::live::{LiveClock, MasterDaemonConfig, SlaveDaemonConfig};
use crate::protocol::{SlaveConfig, DEFAULT_PORT};
use crate::servo::ServoConfig;
use crate::sim::{ChannelModel, ClockSpec, LinkPreset, SimConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}` (first set on line {first})")]
    Duplicate { key: String, line: usize, first: usize },
    #[error("line {line}: unknown key `{key}`")]
    Unknown { key: String, line: usize },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("line {line}: invalid value for `{key}`: {reason}")]
    Invalid { key: String, line: usize, reason: String },
}

/// Parsed key/value pairs. Typed getters consume keys; [`KvFile::finish`]
/// reports whatever was left over as unknown.
#[derive(Debug, Clone, Default)]
pub struct KvFile {
    entries: BTreeMap<String, (String, usize)>,
}

impl FromStr for KvFile {
    type Err = ConfigError;

    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if let Some((_, first)) = entries.get(key) {
                return Err(ConfigError::Duplicate {
                    key: key.to_string(),
                    line,
                    first: *first,
                });
            }
            entries.insert(key.to_string(), (value.to_string(), line));
        }
        Ok(KvFile { entries })
    }
}

impl KvFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io {
                path: path.to_path_buf(),
                source,
            })?
            .parse()
    }

    pub fn get<T>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        let Some((value, line)) = self.entries.remove(key) else {
            return Ok(None);
        };
        value.parse().map(Some).map_err(|e: T::Err| ConfigError::Invalid {
            key: key.to_string(),
            line,
            reason: e.to_string(),
        })
    }

    pub fn get_or<T>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T>(&mut self, key: &'static str) -> Result<T, ConfigError>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.get(key)?.ok_or(ConfigError::Missing(key))
    }

    /// Reads a millisecond value and returns whole nanoseconds.
    fn get_ms_as_ns(&mut self, key: &str) -> Result<Option<u64>, ConfigError> {
        let line = self.line_of(key);
        match self.get::<f64>(key)? {
            Some(ms) if ms.is_finite() && ms >= 0.0 => Ok(Some((ms * 1e6).round() as u64)),
            Some(ms) => Err(invalid(key, line, format!("{ms} is not a non-negative duration"))),
            None => Ok(None),
        }
    }

    fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(_, l)| *l)
    }

    /// Errors on the first key nobody asked for.
    pub fn finish(self) -> Result<(), ConfigError> {
        match self.entries.into_iter().min_by_key(|(_, (_, line))| *line) {
            Some((key, (_, line))) => Err(ConfigError::Unknown { key, line }),
            None => Ok(()),
        }
    }
}

fn invalid(key: &str, line: usize, reason: String) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        line,
        reason,
    }
}

/// Reads `<prefix>.preset`, `.distribution`, `.mean_ns`, `.sigma_ns`,
/// `.drop_prob` and `.min_delay_ns` on top of `base`. A preset replaces the
/// base before the individual keys are applied.
fn channel(kv: &mut KvFile, prefix: &str, base: ChannelModel) -> Result<ChannelModel, ConfigError> {
    let key = |k: &str| format!("{prefix}.{k}");
    let mut ch = match kv.get::<LinkPreset>(&key("preset"))? {
        Some(p) => p.one_way(),
        None => base,
    };
    ch.distribution = kv.get_or(&key("distribution"), ch.distribution)?;
    ch.mean_delay_ns = kv.get_or(&key("mean_ns"), ch.mean_delay_ns)?;
    ch.sigma_ns = kv.get_or(&key("sigma_ns"), ch.sigma_ns)?;
    ch.drop_prob = kv.get_or(&key("drop_prob"), ch.drop_prob)?;
    ch.min_delay_ns = kv.get_or(&key("min_delay_ns"), ch.min_delay_ns)?;
    Ok(ch)
}

/// `servo.*` keys. Returns `None` when `servo.enabled = false`.
fn servo(kv: &mut KvFile, default_enabled: bool) -> Result<Option<ServoConfig>, ConfigError> {
    let enabled = kv.get_or("servo.enabled", default_enabled)?;
    let d = ServoConfig::default();
    let cfg = ServoConfig {
        kp: kv.get_or("servo.kp", d.kp)?,
        ki: kv.get_or("servo.ki", d.ki)?,
        step_threshold_ns: kv.get_or("servo.step_threshold_ns", d.step_threshold_ns)?,
        max_freq_ppb: kv.get_or("servo.max_freq_ppb", d.max_freq_ppb)?,
        lock_threshold_ns: kv.get_or("servo.lock_threshold_ns", d.lock_threshold_ns)?,
        lock_count: kv.get_or("servo.lock_count", d.lock_count)?,
    };
    if enabled {
        cfg.validate().map_err(|e| invalid("servo", 0, e.to_string()))?;
        Ok(Some(cfg))
    } else {
        Ok(None)
    }
}

fn slave_session(kv: &mut KvFile) -> Result<SlaveConfig, ConfigError> {
    let d = SlaveConfig::default();
    Ok(SlaveConfig {
        pairing_timeout_ns: kv.get_ms_as_ns("pairing_timeout_ms")?.unwrap_or(d.pairing_timeout_ns),
        pending_capacity: kv.get_or("pending_capacity", d.pending_capacity)?,
        rx_latency_ns: kv.get_or("rx_latency_ns", d.rx_latency_ns)?,
    })
}

pub fn sim_config(mut kv: KvFile) -> Result<SimConfig, ConfigError> {
    let d = SimConfig::default();
    let seed = kv.require("seed")?;
    let duration_s = kv.require("duration_s")?;
    let beacon_interval_ns = kv.get_ms_as_ns("beacon_interval_ms")?.unwrap_or(d.beacon_interval_ns);
    let follow_up_every = kv.get_or("follow_up_every", d.follow_up_every)?;
    let timestamp_source = kv.get_or("timestamp_source", d.timestamp_source)?;
    let master_clock = ClockSpec {
        offset_ns: kv.get_or("master.offset_ns", 0)?,
        skew_ppm: kv.get_or("master.skew_ppm", 0.0)?,
    };
    let slave_clock = ClockSpec {
        offset_ns: kv.get_or("slave.offset_ns", 0)?,
        skew_ppm: kv.get_or("slave.skew_ppm", 0.0)?,
    };
    let sync_channel = channel(&mut kv, "sync", d.sync_channel)?;
    let followup_channel = channel(&mut kv, "followup", d.followup_channel)?;
    let sync_drop_prob = kv.get_or("sync_drop_prob", d.sync_drop_prob)?;
    let servo = servo(&mut kv, true)?;
    let session = slave_session(&mut kv)?;
    let skew_window = kv.get_or("skew_window", d.skew_window)?;
    let start_true_ns = kv.get_or("start_time_ns", d.start_true_ns)?;
    kv.finish()?;
    Ok(SimConfig {
        seed,
        duration_s,
        beacon_interval_ns,
        follow_up_every,
        timestamp_source,
        master_clock,
        slave_clock,
        sync_channel,
        followup_channel,
        sync_drop_prob,
        servo,
        skew_window,
        pairing_timeout_ns: session.pairing_timeout_ns,
        pending_capacity: session.pending_capacity,
        rx_latency_ns: session.rx_latency_ns,
        start_true_ns,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum BenchTarget {
    /// Every measured link preset.
    AllPresets,
    Preset(LinkPreset),
    Custom(ChannelModel),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub seed: u64,
    pub probes: usize,
    pub target: BenchTarget,
}

pub const DEFAULT_PROBES: usize = 6000;

pub fn bench_config(mut kv: KvFile) -> Result<BenchConfig, ConfigError> {
    let seed = kv.require("seed")?;
    let probes = kv.get_or("probes", DEFAULT_PROBES)?;
    let line = kv.line_of("channel.preset");
    let preset: Option<String> = kv.get("channel.preset")?;
    let target = match preset.as_deref() {
        Some("all") => BenchTarget::AllPresets,
        Some(name) => {
            let p: LinkPreset = name.parse().map_err(|e| invalid("channel.preset", line, e))?;
            // individual keys may still tweak a preset
            match channel(&mut kv, "channel", p.one_way())? {
                ch if ch == p.one_way() => BenchTarget::Preset(p),
                ch => BenchTarget::Custom(ch),
            }
        }
        None => BenchTarget::Custom(channel(&mut kv, "channel", ChannelModel::fixed(1_000_000))?),
    };
    kv.finish()?;
    Ok(BenchConfig { seed, probes, target })
}

struct Net {
    bind_addr: IpAddr,
    port: u16,
    followup_port: u16,
    clock: LiveClock,
}

fn net(kv: &mut KvFile, default_bind: IpAddr) -> Result<Net, ConfigError> {
    let port: u16 = kv.get_or("port", DEFAULT_PORT)?;
    let line = kv.line_of("port");
    let followup_port = match kv.get("followup_port")? {
        Some(p) => p,
        None => port
            .checked_add(1)
            .ok_or_else(|| invalid("port", line, "no room for the FOLLOW_UP port above it".into()))?,
    };
    Ok(Net {
        bind_addr: kv.get_or("bind_addr", default_bind)?,
        port,
        followup_port,
        clock: kv.get_or("clock", LiveClock::Monotonic)?,
    })
}

pub fn master_config(mut kv: KvFile) -> Result<MasterDaemonConfig, ConfigError> {
    let d = MasterDaemonConfig::default();
    let n = net(&mut kv, d.bind_addr)?;
    let broadcast_addr = kv.get_or("broadcast_addr", d.broadcast_addr)?;
    let cfg = MasterDaemonConfig {
        bind_addr: n.bind_addr,
        broadcast_addr,
        followup_addr: kv.get_or("followup_addr", broadcast_addr)?,
        port: n.port,
        followup_port: n.followup_port,
        clock: n.clock,
        beacon_interval_ns: kv.get_ms_as_ns("beacon_interval_ms")?.unwrap_or(d.beacon_interval_ns),
        follow_up_every: kv.get_or("follow_up_every", d.follow_up_every)?,
        timestamp_source: kv.get_or("timestamp_source", d.timestamp_source)?,
        count: kv.get("count")?,
        duration_s: kv.get("duration_s")?,
    };
    kv.finish()?;
    if cfg.beacon_interval_ns == 0 {
        return Err(invalid("beacon_interval_ms", 0, "must be > 0".into()));
    }
    Ok(cfg)
}

pub fn slave_config(mut kv: KvFile) -> Result<SlaveDaemonConfig, ConfigError> {
    let d = SlaveDaemonConfig::default();
    let n = net(&mut kv, d.bind_addr)?;
    let cfg = SlaveDaemonConfig {
        bind_addr: n.bind_addr,
        port: n.port,
        followup_port: n.followup_port,
        clock: n.clock,
        nominal_interval_ns: kv.get_ms_as_ns("beacon_interval_ms")?.unwrap_or(d.nominal_interval_ns),
        timestamp_source: kv.get_or("timestamp_source", d.timestamp_source)?,
        session: slave_session(&mut kv)?,
        skew_window: kv.get_or("skew_window", d.skew_window)?,
        servo: servo(&mut kv, true)?,
        count: kv.get("count")?,
        duration_s: kv.get("duration_s")?,
        trace_out: kv.get("trace_out")?,
        steer_host_clock: false,
    };
    kv.finish()?;
    if cfg.nominal_interval_ns == 0 {
        return Err(invalid("beacon_interval_ms", 0, "must be > 0".into()));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::TimestampSource;
    use crate::sim::DelayDistribution;

    fn kv(text: &str) -> KvFile {
        text.parse().unwrap()
    }

    #[test]
    fn minimal_sim_config() {
        let c = sim_config(kv("seed = 7\nduration_s=300 # five minutes\n\n")).unwrap();
        assert_eq!((c.seed, c.duration_s), (7, 300.0));
        assert_eq!(c.beacon_interval_ns, 102_400_000);
        assert!(c.servo.is_some());
    }

    #[test]
    fn full_sim_config() {
        let text = "\
seed=1
duration_s=10
beacon_interval_ms=102.4
follow_up_every=3
timestamp_source=system
slave.skew_ppm=3.96
slave.offset_ns=-5000
sync.distribution=gaussian
sync.mean_ns=50000
sync.sigma_ns=5000
followup.preset=ethernet
followup.drop_prob=0.1
sync_drop_prob=0.05
servo.enabled=false
servo.kp=0.5
pairing_timeout_ms=500
pending_capacity=16
rx_latency_ns=50000
skew_window=32
start_time_ns=20000000000
";
        let c = sim_config(kv(text)).unwrap();
        assert_eq!(c.follow_up_every, 3);
        assert_eq!(c.timestamp_source, TimestampSource::System);
        assert_eq!(c.slave_clock, ClockSpec { offset_ns: -5000, skew_ppm: 3.96 });
        assert_eq!(c.sync_channel.distribution, DelayDistribution::Gaussian);
        assert_eq!((c.sync_channel.mean_delay_ns, c.sync_channel.sigma_ns), (50_000, 5_000));
        assert_eq!(c.followup_channel.mean_delay_ns, 225_000);
        assert_eq!(c.followup_channel.drop_prob, 0.1);
        assert!(c.servo.is_none());
        assert_eq!(c.pairing_timeout_ns, 500_000_000);
        assert_eq!((c.pending_capacity, c.rx_latency_ns, c.skew_window), (16, 50_000, 32));
        assert_eq!(c.start_true_ns, 20_000_000_000);
    }

    #[test]
    fn diagnostics() {
        assert!(matches!(sim_config(kv("duration_s=1")), Err(ConfigError::Missing("seed"))));
        assert!(matches!(
            sim_config(kv("seed=1\nduration_s=1\nbogus=2")),
            Err(ConfigError::Unknown { line: 3, .. })
        ));
        assert!(matches!(
            "a=1\nb=2\na=3".parse::<KvFile>(),
            Err(ConfigError::Duplicate { line: 3, first: 1, .. })
        ));
        assert!(matches!("just words".parse::<KvFile>(), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(
            sim_config(kv("seed=x\nduration_s=1")),
            Err(ConfigError::Invalid { line: 1, .. })
        ));
        assert!(matches!(
            sim_config(kv("seed=1\nduration_s=1\nsync.preset=carrier-pigeon")),
            Err(ConfigError::Invalid { line: 3, .. })
        ));
    }

    #[test]
    fn bench_targets() {
        let all = bench_config(kv("seed=1\nchannel.preset=all")).unwrap();
        assert_eq!((all.probes, all.target), (6000, BenchTarget::AllPresets));
        let eth = bench_config(kv("seed=1\nprobes=100\nchannel.preset=ethernet")).unwrap();
        assert_eq!(eth.target, BenchTarget::Preset(LinkPreset::Ethernet));
        let custom = bench_config(kv("seed=1\nchannel.distribution=gaussian\nchannel.mean_ns=10\nchannel.sigma_ns=2")).unwrap();
        assert!(matches!(custom.target, BenchTarget::Custom(c) if c.mean_delay_ns == 10));
    }

    #[test]
    fn live_configs() {
        let m = master_config(kv("port=6000\nbroadcast_addr=127.0.0.1\ncount=5")).unwrap();
        assert_eq!((m.port, m.followup_port, m.count), (6000, 6001, Some(5)));
        assert_eq!(m.followup_addr, m.broadcast_addr);
        let s = slave_config(kv("servo.enabled=false\ntrace_out=/tmp/x.csv\nclock=realtime")).unwrap();
        assert_eq!((s.port, s.followup_port), (DEFAULT_PORT, DEFAULT_PORT + 1));
        assert!(s.servo.is_none());
        assert_eq!(s.clock, LiveClock::Realtime);
        assert!(master_config(kv("port=65535")).is_err());
    }
}
