//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! Run with `cargo test -p rbis --test acceptance`.

use std::panic::{self, AssertUnwindSafe};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rbis::clock::{TimePointNs, TimestampSource, TsfTimestamp};
use rbis::protocol::{decode, encode, DecodeError, FollowUpEntry, FollowUpMessage, Message, SyncMessage};
use rbis::servo::{ServoConfig, ServoPhase};
use rbis::sim::{rtt_bench, run_simulation, ChannelModel, ClockSpec, DelayDistribution, LinkPreset, SimConfig};
use rbis::trace::{read_trace, write_trace, TraceRecord};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let held: bool = $cond;
        if !held {
            return Err(format!($($fmt)+));
        }
    };
}

const BEACON_NS: f64 = 102_400_000.0;
const TARGET_SKEW_PPM: f64 = 3.96;
const RUNTIME_LIMIT: Duration = Duration::from_secs(2);

/// Noise-free run with the slave 3.96 ppm fast and the servo off.
fn skew_run(sync_drop_prob: f64) -> SimConfig {
    SimConfig {
        seed: 11,
        duration_s: 300.0,
        timestamp_source: TimestampSource::System,
        slave_clock: ClockSpec::skewed(TARGET_SKEW_PPM),
        sync_drop_prob,
        servo: None,
        ..SimConfig::default()
    }
}

/// Largest deviation of an instantaneous skew value from the true skew that
/// integer offsets can cause: one nanosecond over the master interval.
fn rounding_bound_ppm(seq_gap: u32) -> f64 {
    1e6 / (seq_gap as f64 * BEACON_NS) + 1e-6
}

fn skew_recovery() -> Outcome {
    let started = Instant::now();
    let out = run_simulation(&skew_run(0.0)).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let rows = &out.trace;
    ensure!((2929..=2931).contains(&rows.len()), "expected about 2930 tuples, got {}", rows.len());

    let window_err = rows[1..]
        .iter()
        .map(|r| (r.window_skew_ppm - TARGET_SKEW_PPM).abs())
        .fold(0.0, f64::max);
    ensure!(window_err <= 0.01, "window skew off by {window_err} ppm");

    let bound = rounding_bound_ppm(1);
    let inst_err = rows[1..]
        .iter()
        .map(|r| (r.skew_ppm - TARGET_SKEW_PPM).abs())
        .fold(0.0, f64::max);
    ensure!(inst_err <= bound, "instantaneous skew off by {inst_err} ppm (bound {bound})");
    ensure!(elapsed < RUNTIME_LIMIT, "took {elapsed:?}");

    let last = rows.last().unwrap();
    Ok(format!(
        "{} tuples, final window skew {:.6} ppm, max instantaneous error {:.6} ppm, {:?}",
        rows.len(),
        last.window_skew_ppm,
        inst_err,
        elapsed
    ))
}

fn drop_signature() -> Outcome {
    let out = run_simulation(&skew_run(0.1)).map_err(|e| e.to_string())?;
    let rows = &out.trace;
    let base = TARGET_SKEW_PPM * 1e-6 * BEACON_NS;
    let mut max_gap = 1;
    let mut gaps_seen = 0u64;
    for pair in rows.windows(2) {
        let gap = pair[1].seq - pair[0].seq;
        let inc = pair[1].offset_ns - pair[0].offset_ns;
        ensure!(
            (inc as f64 - gap as f64 * base).abs() <= 1.0,
            "seq {}: increment {inc} ns for gap {gap}, expected {:.3}",
            pair[1].seq,
            gap as f64 * base
        );
        ensure!(
            pair[1].dropped_since_last as u32 == gap - 1,
            "seq {}: dropped_since_last {} for gap {gap}",
            pair[1].seq,
            pair[1].dropped_since_last
        );
        let err = (pair[1].skew_ppm - TARGET_SKEW_PPM).abs();
        ensure!(err <= 0.01, "seq {}: skew {} across gap {gap}", pair[1].seq, pair[1].skew_ppm);
        max_gap = max_gap.max(gap);
        gaps_seen += (gap - 1) as u64;
    }
    let a = out.accounting;
    let leading = rows[0].seq as u64 - 1;
    let trailing = a.beacons - rows.last().unwrap().seq as u64;
    ensure!(
        gaps_seen + leading + trailing == a.sync_drops,
        "seq gaps account for {} drops, simulator injected {}",
        gaps_seen + leading + trailing,
        a.sync_drops
    );
    ensure!(max_gap >= 3, "drop pattern too thin to test (max gap {max_gap})");
    Ok(format!(
        "{} drops injected, gaps up to {max_gap}, every increment = gap x {base:.3} ns within 1 ns",
        a.sync_drops
    ))
}

fn desk_accuracy() -> Outcome {
    let mean_latency = 50_000;
    let cfg = SimConfig {
        seed: 3,
        duration_s: 300.0,
        slave_clock: ClockSpec::skewed(10.0),
        sync_channel: ChannelModel::gaussian(mean_latency, 5_000),
        rx_latency_ns: mean_latency as i64,
        servo: Some(ServoConfig::default()),
        ..SimConfig::default()
    };
    let started = Instant::now();
    let out = run_simulation(&cfg).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let rows = &out.trace;
    let lock = rows
        .iter()
        .position(|r| r.servo_phase == Some(ServoPhase::Locked))
        .ok_or("servo never locked")?;
    let offsets: Vec<i64> = rows[lock..].iter().map(|r| r.disciplined_offset_ns.unwrap()).collect();
    let worst = offsets.iter().map(|o| o.abs()).max().unwrap();
    ensure!(worst <= 50_000, "|offset| reached {worst} ns after lock");
    ensure!(offsets.len() >= 1000, "only {} samples after lock", offsets.len());
    let tail = &offsets[offsets.len() - 1000..];
    let mean_abs = tail.iter().map(|o| o.abs() as f64).sum::<f64>() / tail.len() as f64;
    ensure!(mean_abs <= 15_000.0, "mean |offset| {mean_abs} ns over the last 1000 samples");
    ensure!(elapsed < RUNTIME_LIMIT, "took {elapsed:?}");
    Ok(format!(
        "locked at row {lock}, max |offset| {:.1} us, final-1000 mean |offset| {:.2} us, {elapsed:?}",
        worst as f64 / 1e3,
        mean_abs / 1e3
    ))
}

/// The fields of a trace row that depend only on the tuple stream.
fn estimate_view(r: &TraceRecord) -> (u32, u64, u64, i64, u64, u64, u16) {
    (
        r.seq,
        r.t_master_ns,
        r.t_slave_ns,
        r.offset_ns,
        r.skew_ppm.to_bits(),
        r.window_skew_ppm.to_bits(),
        r.dropped_since_last,
    )
}

fn followup_delay_invariance() -> Outcome {
    let base = SimConfig {
        seed: 5,
        duration_s: 120.0,
        slave_clock: ClockSpec { offset_ns: 2_500_000, skew_ppm: -17.0 },
        sync_channel: LinkPreset::Bss24Ghz.one_way(),
        sync_drop_prob: 0.05,
        servo: None,
        ..SimConfig::default()
    };
    let fixed = SimConfig {
        followup_channel: ChannelModel::fixed(1_000_000),
        ..base.clone()
    };
    let jittered = SimConfig {
        followup_channel: ChannelModel {
            distribution: DelayDistribution::Gaussian,
            ..ChannelModel::gaussian(3_190_000, 1_800_000)
        },
        ..base
    };
    let a = run_simulation(&fixed).map_err(|e| e.to_string())?;
    let b = run_simulation(&jittered).map_err(|e| e.to_string())?;
    ensure!(a.trace.len() == b.trace.len(), "{} vs {} tuples", a.trace.len(), b.trace.len());
    let va: Vec<_> = a.trace.iter().map(estimate_view).collect();
    let vb: Vec<_> = b.trace.iter().map(estimate_view).collect();
    if let Some(i) = (0..va.len()).find(|&i| va[i] != vb[i]) {
        return Err(format!("row {i} differs: {:?} vs {:?}", va[i], vb[i]));
    }
    ensure!(a.increments == b.increments, "increment series differ");
    let overtaken = b
        .trace
        .iter()
        .filter(|r| r.true_time_ns.unwrap() != a.trace.iter().find(|x| x.seq == r.seq).unwrap().true_time_ns.unwrap())
        .count();
    Ok(format!("{} identical tuples and estimates; {overtaken} formed at a different time", va.len()))
}

const PROBE_SEED: u64 = 1;
const PROBES: usize = 6000;

fn channel_statistics() -> Outcome {
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for preset in LinkPreset::ALL {
        let (mean, sigma) = preset.rtt_ms();
        let r = rtt_bench(&preset.one_way(), PROBES, PROBE_SEED).map_err(|e| e.to_string())?;
        let again = rtt_bench(&preset.one_way(), PROBES, PROBE_SEED).map_err(|e| e.to_string())?;
        ensure!(r == again, "{}: not deterministic", preset.label());
        let (me, se) = (r.rtt_ms.mean_rel_err(mean), r.rtt_ms.sigma_rel_err(sigma));
        lines.push(format!(
            "{} {:.3}±{:.3} ms (mean {:+.2}%, sigma {:+.2}%)",
            preset.key(),
            r.rtt_ms.mean,
            r.rtt_ms.sample_sigma,
            (r.rtt_ms.mean / mean - 1.0) * 100.0,
            (r.rtt_ms.sample_sigma / sigma - 1.0) * 100.0
        ));
        if me > 0.02 || se > 0.05 {
            failures.push(preset.key());
        }
    }
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!("out of tolerance: {}; {}", failures.join(", "), lines.join("; ")))
    }
}

const GOLDEN_FOLLOW_UP: [u8; 26] = [
    0x52, 0x42, 0x49, 0x53, 0x01, 0x02, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x01, 0x90, 0x00, 0x00,
    0x00, 0x00, 0x00, 0x3B, 0x9A, 0xCA, 0x00,
];

fn random_message(rng: &mut ChaCha8Rng) -> Message {
    let seq = rng.random();
    let tsf_us = TsfTimestamp(rng.random());
    if rng.random_bool(0.5) {
        return Message::Sync(SyncMessage { seq, tsf_us });
    }
    let extras = match rng.random_range(0..10) {
        0..=4 => 0,
        5..=8 => rng.random_range(1..8),
        _ => rng.random_range(1..=255),
    };
    Message::FollowUp(FollowUpMessage {
        seq,
        tsf_us,
        master_time_ns: TimePointNs(rng.random()),
        extra: (0..extras)
            .map(|_| FollowUpEntry {
                seq: rng.random(),
                master_time_ns: TimePointNs(rng.random()),
            })
            .collect(),
    })
}

fn wire_format() -> Outcome {
    let expected = Message::FollowUp(FollowUpMessage::single(1, TsfTimestamp(102_400), TimePointNs(1_000_000_000)));
    ensure!(decode(&GOLDEN_FOLLOW_UP) == Ok(expected.clone()), "golden vector decoded wrong");
    ensure!(encode(&expected) == GOLDEN_FOLLOW_UP, "golden message encoded wrong");

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for i in 0..100_000 {
        let m = random_message(&mut rng);
        let bytes = encode(&m);
        ensure!(decode(&bytes).as_ref() == Ok(&m), "round trip {i} failed for {m:?}");
        ensure!(encode(&decode(&bytes).unwrap()) == bytes, "re-encode {i} differs");
    }

    let sync = encode(&Message::Sync(SyncMessage { seq: 9, tsf_us: TsfTimestamp(1) }));
    let batched = encode(&Message::FollowUp(FollowUpMessage {
        extra: vec![FollowUpEntry { seq: 8, master_time_ns: TimePointNs(5) }],
        ..FollowUpMessage::single(9, TsfTimestamp(1), TimePointNs(6))
    }));
    let with = |base: &[u8], at: usize, v: u8| {
        let mut b = base.to_vec();
        b[at] = v;
        b
    };
    let plus = |base: &[u8], extra: &[u8]| [base, extra].concat();
    let cases: Vec<(&str, Vec<u8>, DecodeError)> = vec![
        ("empty", vec![], DecodeError::Truncated { needed: 6, got: 0 }),
        ("short header", b"RBI".to_vec(), DecodeError::Truncated { needed: 6, got: 3 }),
        ("bad magic", with(&sync, 0, b'X'), DecodeError::BadMagic(*b"XBIS")),
        ("bad version", with(&sync, 4, 2), DecodeError::UnsupportedVersion(2)),
        ("unknown type", with(&sync, 5, 7), DecodeError::UnknownType(7)),
        ("short SYNC", sync[..17].to_vec(), DecodeError::Truncated { needed: 18, got: 17 }),
        ("long SYNC", plus(&sync, &[0]), DecodeError::TrailingBytes { extra: 1 }),
        ("short FOLLOW_UP", GOLDEN_FOLLOW_UP[..20].to_vec(), DecodeError::Truncated { needed: 26, got: 20 }),
        ("zero entry count", plus(&GOLDEN_FOLLOW_UP, &[0]), DecodeError::ZeroEntryCount),
        ("short batch", batched[..batched.len() - 1].to_vec(), DecodeError::Truncated { needed: 39, got: 38 }),
        ("long batch", plus(&batched, &[1, 2]), DecodeError::TrailingBytes { extra: 2 }),
    ];
    for (name, bytes, err) in &cases {
        let got = decode(bytes);
        ensure!(got.as_ref() == Err(err), "{name}: expected {err:?}, got {got:?}");
    }
    Ok(format!("golden vector ok, 100000 round trips, {} malformed cases rejected", cases.len()))
}

const SIM_CONFIG: &str = "\
seed = 42
duration_s = 60
slave.skew_ppm = 3.96
slave.offset_ns = 1500000
sync.preset = bss-5ghz
followup.preset = bss-2.4ghz
sync_drop_prob = 0.05
follow_up_every = 2
";

fn random_config(rng: &mut ChaCha8Rng) -> SimConfig {
    let channel = |rng: &mut ChaCha8Rng, max_mean: u64| {
        let distribution = [
            DelayDistribution::Fixed,
            DelayDistribution::Gaussian,
            DelayDistribution::Uniform,
            DelayDistribution::Gamma,
        ][rng.random_range(0..4)];
        let mean = rng.random_range(1_000..max_mean);
        ChannelModel {
            mean_delay_ns: mean,
            sigma_ns: rng.random_range(0..mean),
            distribution,
            drop_prob: if rng.random_bool(0.5) { rng.random_range(0.0..0.3) } else { 0.0 },
            min_delay_ns: 1_000,
        }
    };
    SimConfig {
        seed: rng.random(),
        duration_s: rng.random_range(2.0..30.0),
        follow_up_every: rng.random_range(1..6),
        timestamp_source: if rng.random_bool(0.5) { TimestampSource::Tsf } else { TimestampSource::System },
        slave_clock: ClockSpec {
            offset_ns: rng.random_range(-5_000_000..5_000_000),
            skew_ppm: rng.random_range(-100.0..100.0),
        },
        sync_channel: channel(rng, 20_000_000),
        followup_channel: channel(rng, 1_500_000_000),
        sync_drop_prob: rng.random_range(0.0..0.3),
        servo: rng.random_bool(0.5).then(ServoConfig::default),
        pairing_timeout_ns: rng.random_range(50_000_000..1_000_000_000),
        pending_capacity: rng.random_range(1..16),
        ..SimConfig::default()
    }
}

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = dir.path().join("run.conf");
    std::fs::write(&cfg_path, SIM_CONFIG).map_err(|e| e.to_string())?;
    let mut files = Vec::new();
    for name in ["a.csv", "b.csv"] {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_rbis"))
            .arg("simulate")
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(status.status.success(), "simulate failed: {}", String::from_utf8_lossy(&status.stderr));
        files.push(std::fs::read(&out).map_err(|e| e.to_string())?);
    }
    ensure!(files[0] == files[1], "two runs with one seed wrote different files");

    let trace = read_trace(files[0].as_slice()).map_err(|e| e.to_string())?;
    ensure!(trace.len() > 500, "trace unexpectedly short ({} rows)", trace.len());
    let mut rewritten = Vec::new();
    write_trace(&trace, &mut rewritten).map_err(|e| e.to_string())?;
    ensure!(rewritten == files[0], "rewriting a parsed trace changed its bytes");
    ensure!(read_trace(rewritten.as_slice()).map_err(|e| e.to_string())? == trace, "trace round trip differs");

    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut totals = [0u64; 4];
    for i in 0..100 {
        let cfg = random_config(&mut rng);
        let out = run_simulation(&cfg).map_err(|e| format!("config {i}: {e} {cfg:?}"))?;
        let a = out.accounting;
        ensure!(a.conserved(), "config {i}: {a:?} does not balance ({cfg:?})");
        let mut buf = Vec::new();
        write_trace(&out.trace, &mut buf).map_err(|e| e.to_string())?;
        ensure!(read_trace(buf.as_slice()).map_err(|e| e.to_string())? == out.trace, "config {i}: trace round trip");
        for (t, v) in totals.iter_mut().zip([a.tuples, a.sync_drops, a.followup_losses, a.pairing_expiries]) {
            *t += v;
        }
    }
    ensure!(totals.iter().all(|&t| t > 0), "randomized configs never exercised one outcome: {totals:?}");
    Ok(format!(
        "identical CSV ({} bytes), round trip ok, 100 configs balance (tuples {}, sync drops {}, follow-up losses {}, expiries {})",
        files[0].len(),
        totals[0],
        totals[1],
        totals[2],
        totals[3]
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("skew recovery", skew_recovery),
        ("drop signature", drop_signature),
        ("desk-scale accuracy", desk_accuracy),
        ("FOLLOW_UP delay invariance", followup_delay_invariance),
        ("channel statistics", channel_statistics),
        ("wire format", wire_format),
        ("determinism and persistence", determinism_and_persistence),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
