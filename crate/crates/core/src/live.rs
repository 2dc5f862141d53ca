//! UDP master and slave daemons.
//!
//! The master broadcasts a SYNC per beacon interval on `port` and the
//! FOLLOW_UPs on `followup_port`. Its "TSF" is the local monotonic (or
//! realtime) clock in microseconds.
//!
//! The slave has one receiver thread that polls both sockets, timestamps each
//! datagram right after `recv` returns and forwards it through a channel to
//! the processing loop, which runs the same [`SlaveNode`] as the simulator.
//! Servo actions go to a software clock overlay unless host steering is
//! explicitly requested.

use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, UdpSocket};
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use thiserror::Error;

use crate::clock::{ClockError, SimulatedClock, TimePointNs, TimestampSource, TsfTimestamp};
use crate::estimator::DEFAULT_WINDOW;
use crate::node::{apply_action_since, SlaveNode, TupleOutcome};
use crate::protocol::{decode, encode, MasterConfig, MasterError, MasterSession, Message, SlaveConfig, SlaveCounters, DEFAULT_PORT};
use crate::servo::{ServoAction, ServoConfig, ServoError};
use crate::sim::DEFAULT_BEACON_INTERVAL_NS;
use crate::trace::{TraceError, TraceRecord, TraceWriter};

const POLL_MS: i32 = 50;
const MAX_DATAGRAM: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiveClock {
    Monotonic,
    Realtime,
}

impl LiveClock {
    fn id(self) -> libc::clockid_t {
        match self {
            LiveClock::Monotonic => libc::CLOCK_MONOTONIC,
            LiveClock::Realtime => libc::CLOCK_REALTIME,
        }
    }

    pub fn now_ns(self) -> u64 {
        let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
        // SAFETY: ts is a valid, writable timespec.
        let rc = unsafe { libc::clock_gettime(self.id(), &mut ts) };
        assert_eq!(rc, 0, "clock_gettime failed");
        ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
    }
}

impl FromStr for LiveClock {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "monotonic" => Ok(LiveClock::Monotonic),
            "realtime" => Ok(LiveClock::Realtime),
            other => Err(format!("unknown clock `{other}` (expected monotonic or realtime)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("socket: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error(transparent)]
    Master(#[from] MasterError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error("trace: {0}")]
    Trace(#[from] TraceError),
    #[error("{0}")]
    Config(String),
    #[error("host clock: {0}")]
    HostClock(io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterDaemonConfig {
    pub bind_addr: IpAddr,
    pub broadcast_addr: IpAddr,
    pub followup_addr: IpAddr,
    pub port: u16,
    pub followup_port: u16,
    pub clock: LiveClock,
    pub beacon_interval_ns: u64,
    pub follow_up_every: u32,
    pub timestamp_source: TimestampSource,
    /// Stop after this many beacons.
    pub count: Option<u64>,
    pub duration_s: Option<f64>,
}

impl Default for MasterDaemonConfig {
    fn default() -> Self {
        MasterDaemonConfig {
            bind_addr: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            broadcast_addr: IpAddr::V4(Ipv4Addr::BROADCAST),
            followup_addr: IpAddr::V4(Ipv4Addr::BROADCAST),
            port: DEFAULT_PORT,
            followup_port: DEFAULT_PORT + 1,
            clock: LiveClock::Monotonic,
            beacon_interval_ns: DEFAULT_BEACON_INTERVAL_NS,
            follow_up_every: 1,
            timestamp_source: TimestampSource::Tsf,
            count: None,
            duration_s: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MasterReport {
    pub beacons: u64,
    pub followups: u64,
}

fn deadline_ns(clock: LiveClock, duration_s: Option<f64>) -> Option<u64> {
    duration_s.map(|s| clock.now_ns() + (s * 1e9) as u64)
}

fn sleep_until(clock: LiveClock, target_ns: u64) {
    let now = clock.now_ns();
    if target_ns > now {
        thread::sleep(Duration::from_nanos(target_ns - now));
    }
}

pub fn run_master(cfg: &MasterDaemonConfig, stop: &AtomicBool) -> Result<MasterReport, LiveError> {
    if cfg.beacon_interval_ns == 0 {
        return Err(LiveError::Config("beacon interval must be > 0".into()));
    }
    let mut session = MasterSession::new(MasterConfig {
        follow_up_every: cfg.follow_up_every,
        timestamp_source: cfg.timestamp_source,
    })?;
    let socket = UdpSocket::bind(SocketAddr::new(cfg.bind_addr, 0))?;
    socket.set_broadcast(true)?;
    let sync_dest = SocketAddr::new(cfg.broadcast_addr, cfg.port);
    let followup_dest = SocketAddr::new(cfg.followup_addr, cfg.followup_port);
    info!("master: SYNC -> {sync_dest}, FOLLOW_UP -> {followup_dest}");

    let end = deadline_ns(cfg.clock, cfg.duration_s);
    let mut report = MasterReport::default();
    let mut next = cfg.clock.now_ns();
    loop {
        if stop.load(Ordering::Relaxed)
            || cfg.count.is_some_and(|c| report.beacons >= c)
            || end.is_some_and(|e| next >= e)
        {
            break;
        }
        sleep_until(cfg.clock, next);
        let now = cfg.clock.now_ns();
        let out = session.on_beacon(TsfTimestamp::from_clock_ns(TimePointNs(now)), TimePointNs(now))?;
        socket.send_to(&encode(&Message::Sync(out.sync)), sync_dest)?;
        report.beacons += 1;
        if let Some(fu) = out.follow_up {
            socket.send_to(&encode(&Message::FollowUp(fu)), followup_dest)?;
            report.followups += 1;
        }
        debug!("beacon seq {} tsf {}", out.sync.seq, out.sync.tsf_us);
        next += cfg.beacon_interval_ns;
    }
    if let Some(fu) = session.flush() {
        socket.send_to(&encode(&Message::FollowUp(fu)), followup_dest)?;
        report.followups += 1;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlaveDaemonConfig {
    pub bind_addr: IpAddr,
    pub port: u16,
    pub followup_port: u16,
    pub clock: LiveClock,
    pub nominal_interval_ns: u64,
    pub timestamp_source: TimestampSource,
    pub session: SlaveConfig,
    pub skew_window: usize,
    pub servo: Option<ServoConfig>,
    /// Stop after this many trace rows.
    pub count: Option<u64>,
    pub duration_s: Option<f64>,
    pub trace_out: Option<PathBuf>,
    /// Apply servo actions to the host's realtime clock. Needs privileges.
    pub steer_host_clock: bool,
}

impl Default for SlaveDaemonConfig {
    fn default() -> Self {
        SlaveDaemonConfig {
            bind_addr: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            port: DEFAULT_PORT,
            followup_port: DEFAULT_PORT + 1,
            clock: LiveClock::Monotonic,
            nominal_interval_ns: DEFAULT_BEACON_INTERVAL_NS,
            timestamp_source: TimestampSource::Tsf,
            session: SlaveConfig::default(),
            skew_window: DEFAULT_WINDOW,
            servo: Some(ServoConfig::default()),
            count: None,
            duration_s: None,
            trace_out: None,
            steer_host_clock: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SlaveReport {
    pub rows: u64,
    pub counters: SlaveCounters,
    pub decode_errors: u64,
    pub estimator_discards: u64,
}

struct Datagram {
    payload: Vec<u8>,
    rx_raw_ns: u64,
}

/// Polls both sockets from one thread and forwards datagrams in reception order.
fn receiver(sockets: [UdpSocket; 2], clock: LiveClock, stop: Arc<AtomicBool>, tx: mpsc::Sender<Datagram>) -> io::Result<()> {
    use std::os::fd::AsRawFd;
    let mut fds: Vec<libc::pollfd> = sockets
        .iter()
        .map(|s| libc::pollfd {
            fd: s.as_raw_fd(),
            events: libc::POLLIN,
            revents: 0,
        })
        .collect();
    let mut buf = [0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::Relaxed) {
        // SAFETY: fds points to fds.len() initialized pollfd structs.
        let n = unsafe { libc::poll(fds.as_mut_ptr(), fds.len() as libc::nfds_t, POLL_MS) };
        if n < 0 {
            let err = io::Error::last_os_error();
            if err.kind() == io::ErrorKind::Interrupted {
                continue;
            }
            return Err(err);
        }
        for (fd, socket) in fds.iter_mut().zip(&sockets) {
            if fd.revents & libc::POLLIN == 0 {
                continue;
            }
            fd.revents = 0;
            let (len, _) = socket.recv_from(&mut buf)?;
            let rx_raw_ns = clock.now_ns();
            let d = Datagram {
                payload: buf[..len].to_vec(),
                rx_raw_ns,
            };
            if tx.send(d).is_err() {
                return Ok(());
            }
        }
    }
    Ok(())
}

/// Where the slave's notion of time comes from and where servo actions go.
enum Discipline {
    /// Logical clock layered over the raw clock.
    Software(SimulatedClock),
    /// The host realtime clock itself.
    Host { last_freq_ppb: i64 },
}

impl Discipline {
    fn local_ns(&mut self, raw_ns: u64, source: TimestampSource) -> Result<TimePointNs, ClockError> {
        match self {
            Discipline::Software(clock) => source.stamp(clock, TimePointNs(raw_ns)),
            Discipline::Host { .. } => Ok(match source {
                TimestampSource::Tsf => TsfTimestamp::from_clock_ns(TimePointNs(raw_ns)).to_ns(),
                TimestampSource::System => TimePointNs(raw_ns),
            }),
        }
    }

    fn apply(&mut self, action: ServoAction, raw_ns: u64, sampled_local: TimePointNs) -> Result<(), LiveError> {
        match self {
            Discipline::Software(clock) => Ok(apply_action_since(clock, action, TimePointNs(raw_ns), sampled_local)?),
            Discipline::Host { last_freq_ppb } => {
                host::apply(action).map_err(LiveError::HostClock)?;
                if let ServoAction::SetFreq(ppb) = action {
                    *last_freq_ppb = ppb;
                }
                Ok(())
            }
        }
    }

    fn freq_ppb(&self) -> i64 {
        match self {
            Discipline::Software(clock) => clock.freq_adj_ppb(),
            Discipline::Host { last_freq_ppb } => *last_freq_ppb,
        }
    }
}

/// Runs the slave until `count` rows, `duration_s`, or `stop`. Every trace row
/// is also handed to `on_row`.
pub fn run_slave(
    cfg: &SlaveDaemonConfig,
    stop: &AtomicBool,
    mut on_row: impl FnMut(&TraceRecord),
) -> Result<SlaveReport, LiveError> {
    if cfg.steer_host_clock && cfg.clock != LiveClock::Realtime {
        return Err(LiveError::Config("host clock steering needs `clock = realtime`".into()));
    }
    let mut node = SlaveNode::new(cfg.session.clone(), cfg.skew_window, cfg.servo.clone(), cfg.nominal_interval_ns)?;
    let mut discipline = if cfg.steer_host_clock {
        warn!("steering the host realtime clock");
        Discipline::Host { last_freq_ppb: 0 }
    } else {
        Discipline::Software(SimulatedClock::ideal())
    };
    let mut trace = match &cfg.trace_out {
        Some(path) => Some(TraceWriter::new(io::BufWriter::new(std::fs::File::create(path)?))?),
        None => None,
    };

    let sync_sock = UdpSocket::bind(SocketAddr::new(cfg.bind_addr, cfg.port))?;
    let fu_sock = UdpSocket::bind(SocketAddr::new(cfg.bind_addr, cfg.followup_port))?;
    info!("slave: listening on {} and {}", sync_sock.local_addr()?, fu_sock.local_addr()?);

    let rx_stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();
    let rx_handle = {
        let rx_stop = Arc::clone(&rx_stop);
        let clock = cfg.clock;
        thread::spawn(move || receiver([sync_sock, fu_sock], clock, rx_stop, tx))
    };

    let end = deadline_ns(cfg.clock, cfg.duration_s);
    let mut report = SlaveReport::default();
    let result = (|| -> Result<(), LiveError> {
        loop {
            if stop.load(Ordering::Relaxed)
                || cfg.count.is_some_and(|c| report.rows >= c)
                || end.is_some_and(|e| cfg.clock.now_ns() >= e)
            {
                return Ok(());
            }
            let d = match rx.recv_timeout(Duration::from_millis(POLL_MS as u64)) {
                Ok(d) => d,
                Err(mpsc::RecvTimeoutError::Timeout) => continue,
                Err(mpsc::RecvTimeoutError::Disconnected) => return Ok(()),
            };
            let tuples = match decode(&d.payload) {
                Ok(Message::Sync(msg)) => {
                    let local = discipline.local_ns(d.rx_raw_ns, cfg.timestamp_source)?;
                    node.on_sync(&msg, local)
                }
                Ok(Message::FollowUp(msg)) => {
                    let local = discipline.local_ns(d.rx_raw_ns, TimestampSource::System)?;
                    node.on_follow_up(&msg, local)
                }
                Err(e) => {
                    report.decode_errors += 1;
                    warn!("dropping malformed datagram: {e}");
                    continue;
                }
            };
            for tuple in tuples {
                let p = match node.handle_tuple(tuple) {
                    TupleOutcome::Estimated(p) => p,
                    TupleOutcome::Discarded(why) => {
                        report.estimator_discards += 1;
                        debug!("seq {}: discarded ({why:?})", tuple.seq);
                        continue;
                    }
                    TupleOutcome::Fault(e) => {
                        report.estimator_discards += 1;
                        warn!("seq {}: {e}", tuple.seq);
                        continue;
                    }
                };
                if let Some(action) = p.action {
                    discipline.apply(action, d.rx_raw_ns, p.rx_local_ns)?;
                }
                let row = TraceRecord {
                    true_time_ns: None,
                    seq: tuple.seq,
                    t_master_ns: tuple.t_master_ns.0,
                    t_slave_ns: tuple.t_slave_ns.0,
                    offset_ns: p.estimate.offset_ns,
                    skew_ppm: p.estimate.skew_ppm,
                    window_skew_ppm: p.estimate.window_skew_ppm,
                    dropped_since_last: p.estimate.dropped_since_last,
                    servo_phase: p.phase,
                    servo_output_ppb: discipline.freq_ppb(),
                    disciplined_offset_ns: None,
                }
                .quantized();
                if let Some(w) = trace.as_mut() {
                    w.write(&row)?;
                }
                on_row(&row);
                report.rows += 1;
            }
        }
    })();

    rx_stop.store(true, Ordering::Relaxed);
    drop(rx);
    match rx_handle.join() {
        Ok(Err(e)) if result.is_ok() => return Err(e.into()),
        Err(_) => return Err(LiveError::Config("receiver thread panicked".into())),
        _ => {}
    }
    result?;
    // the loop has stopped, so tuples released here are not reported
    let _ = node.flush();
    report.counters = node.counters();
    Ok(report)
}

#[cfg(target_os = "linux")]
mod host {
    use std::io;

    use crate::servo::ServoAction;

    fn check(rc: libc::c_int) -> io::Result<()> {
        if rc < 0 {
            Err(io::Error::last_os_error())
        } else {
            Ok(())
        }
    }

    pub fn apply(action: ServoAction) -> io::Result<()> {
        match action {
            ServoAction::SetFreq(ppb) => {
                // SAFETY: an all-zero timex is a valid "no change" request.
                let mut tx: libc::timex = unsafe { std::mem::zeroed() };
                tx.modes = libc::ADJ_FREQUENCY;
                // kernel unit is ppm with a 16-bit fractional part
                tx.freq = (ppb as f64 * 65.536).round() as libc::c_long;
                // SAFETY: tx is a valid timex.
                check(unsafe { libc::adjtimex(&mut tx) })
            }
            ServoAction::Step(delta_ns) => {
                let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
                // SAFETY: ts is a valid, writable timespec.
                check(unsafe { libc::clock_gettime(libc::CLOCK_REALTIME, &mut ts) })?;
                let total = ts.tv_sec as i128 * 1_000_000_000 + ts.tv_nsec as i128 + delta_ns as i128;
                ts.tv_sec = total.div_euclid(1_000_000_000) as libc::time_t;
                ts.tv_nsec = total.rem_euclid(1_000_000_000) as libc::c_long;
                // SAFETY: ts holds a normalized time.
                check(unsafe { libc::clock_settime(libc::CLOCK_REALTIME, &ts) })
            }
        }
    }
}

#[cfg(not(target_os = "linux"))]
mod host {
    use std::io;

    use crate::servo::ServoAction;

    pub fn apply(_: ServoAction) -> io::Result<()> {
        Err(io::Error::new(io::ErrorKind::Unsupported, "host clock steering is only implemented on Linux"))
    }
}
