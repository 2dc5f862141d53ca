use proptest::collection::vec;
use proptest::prelude::*;

use rbis::clock::{SimulatedClock, TimePointNs, TimestampSource, TsfTimestamp};
use rbis::estimator::{compute_offset, compute_skew, Estimator, SyncEstimate, TimestampTuple};
use rbis::protocol::{decode, encode, FollowUpEntry, FollowUpMessage, Message, SyncMessage};
use rbis::servo::{ClockServo, PiServo, ServoAction, ServoConfig, ServoPhase};
use rbis::sim::{run_simulation, ChannelModel, ClockSpec, DelayDistribution, SimConfig};
use rbis::stats::{compute_stats, percentile};
use rbis::trace::{read_trace, write_trace, TraceRecord};

const INTERVAL: u64 = 102_400_000;

fn exact_round(n: i128, d: i128) -> i128 {
    // ties away from zero, computed on magnitudes
    let q = (2 * n.abs() + d) / (2 * d);
    q * n.signum()
}

fn ideal_config(secs: f64) -> SimConfig {
    SimConfig {
        duration_s: secs,
        timestamp_source: TimestampSource::System,
        servo: None,
        ..SimConfig::default()
    }
}

fn delay_channel() -> impl Strategy<Value = ChannelModel> {
    (
        prop_oneof![
            Just(DelayDistribution::Fixed),
            Just(DelayDistribution::Gaussian),
            Just(DelayDistribution::Uniform),
            Just(DelayDistribution::Gamma),
        ],
        1_000u64..300_000_000,
        0.0f64..1.0,
    )
        .prop_map(|(distribution, mean, cv)| ChannelModel {
            mean_delay_ns: mean,
            sigma_ns: (mean as f64 * cv) as u64,
            distribution,
            drop_prob: 0.0,
            min_delay_ns: 1_000,
        })
}

proptest! {
    #[test]
    fn tsf_is_floor_of_clock(
        offset in 0i64..1_000_000_000_000,
        micro_ppm in -1_000_000_000i64..=1_000_000_000,
        steps in vec(0u64..10_000_000_000, 1..20),
    ) {
        let mut clock = SimulatedClock::new(offset, micro_ppm as f64 / 1e6).unwrap();
        let mut t = 0u64;
        for dt in steps {
            t += dt;
            let value = clock.value_at(TimePointNs(t)).unwrap();
            let tsf = clock.tsf_read(TimePointNs(t)).unwrap();
            prop_assert_eq!(tsf, TsfTimestamp(value as u64 / 1000));
            prop_assert_eq!(tsf.as_micros(), value.div_euclid(1000) as u64);
        }
    }

    #[test]
    fn frequency_changes_compose_exactly(
        offset in 0i64..1_000_000_000,
        micro_ppm in -1_000_000_000i64..=1_000_000_000,
        adjustments in vec((0u64..100_000_000_000, -500_000i64..=500_000), 1..10),
        probe in 0u64..1_000_000_000_000,
    ) {
        let mut clock = SimulatedClock::new(offset, micro_ppm as f64 / 1e6).unwrap();
        let mut t0 = 0u64;
        for (dt, adj) in adjustments {
            let t = t0 + dt;
            let before = clock.value_at(TimePointNs(t)).unwrap();
            clock.set_freq(adj, TimePointNs(t)).unwrap();
            // continuous at the change
            prop_assert_eq!(clock.value_at(TimePointNs(t)).unwrap(), before);
            let t1 = t + probe;
            let fine_rate = micro_ppm as i128 + adj as i128 * 1_000;
            let expected = before as i128 + probe as i128 + exact_round(probe as i128 * fine_rate, 1_000_000_000_000);
            prop_assert_eq!(clock.read(TimePointNs(t1)).unwrap().0 as i128, expected);
            t0 = t1;
        }
    }

    #[test]
    fn clock_without_steps_is_monotone_and_continuous(
        micro_ppm in -1_000_000_000i64..=1_000_000_000,
        adjustments in vec((1u64..1_000_000, -500_000i64..=500_000), 1..30),
    ) {
        let mut clock = SimulatedClock::new(1_000_000, micro_ppm as f64 / 1e6).unwrap();
        let mut t = 0u64;
        let mut last = clock.value_at(TimePointNs(0)).unwrap();
        for (dt, adj) in adjustments {
            for k in 1..=dt.min(64) {
                let v = clock.value_at(TimePointNs(t + k)).unwrap();
                prop_assert!(v >= last && v - last <= 3, "jump {} -> {}", last, v);
                last = v;
            }
            t += dt;
            last = clock.value_at(TimePointNs(t)).unwrap();
            clock.set_freq(adj, TimePointNs(t)).unwrap();
            prop_assert_eq!(clock.value_at(TimePointNs(t)).unwrap(), last);
        }
    }

    #[test]
    fn skew_is_independent_of_dropped_beacons(
        per_beacon in -100_000i64..100_000,
        start_offset in -1_000_000_000i64..1_000_000_000,
        kept in vec(any::<bool>(), 2..200),
    ) {
        let tuple = |i: u64| TimestampTuple {
            seq: i as u32 + 1,
            t_master_ns: TimePointNs(10_000_000_000 + i * INTERVAL),
            t_slave_ns: TimePointNs((20_000_000_000 + i as i64 * INTERVAL as i64 + start_offset + i as i64 * per_beacon) as u64),
        };
        let reference = {
            let (a, b) = (tuple(0), tuple(1));
            compute_skew(compute_offset(&a), compute_offset(&b), a.t_master_ns, b.t_master_ns).unwrap()
        };
        let accepted: Vec<_> = (0..kept.len() as u64).filter(|&i| i == 0 || kept[i as usize]).map(tuple).collect();
        for pair in accepted.windows(2) {
            let s = compute_skew(compute_offset(&pair[0]), compute_offset(&pair[1]), pair[0].t_master_ns, pair[1].t_master_ns).unwrap();
            prop_assert_eq!(s, reference);
        }
    }

    #[test]
    fn estimator_is_deterministic_and_offsets_antisymmetric(
        deltas in vec((1u64..1_000_000_000, 1u64..1_000_000_000), 1..100),
    ) {
        let mut tm = 5_000_000_000u64;
        let mut ts = 7_000_000_000u64;
        let tuples: Vec<_> = deltas
            .iter()
            .enumerate()
            .map(|(i, &(dm, ds))| {
                tm += dm;
                ts += ds;
                TimestampTuple { seq: i as u32 + 1, t_master_ns: TimePointNs(tm), t_slave_ns: TimePointNs(ts) }
            })
            .collect();
        let run = |ts: &[TimestampTuple]| -> Vec<SyncEstimate> {
            let mut e = Estimator::default();
            ts.iter().map(|t| e.update(*t).unwrap().unwrap()).collect()
        };
        let a = run(&tuples);
        prop_assert_eq!(&a, &run(&tuples));
        let swapped: Vec<_> = tuples
            .iter()
            .map(|t| TimestampTuple { seq: t.seq, t_master_ns: t.t_slave_ns, t_slave_ns: t.t_master_ns })
            .collect();
        for (x, y) in a.iter().zip(run(&swapped)) {
            prop_assert_eq!(x.offset_ns, -y.offset_ns);
        }
    }

    #[test]
    fn window_skew_converges_on_noise_free_pair(micro_ppm in -500_000_000i64..500_000_000, offset in 0i64..1_000_000_000) {
        let skew = micro_ppm as f64 / 1e6;
        let mut slave = SimulatedClock::new(offset, skew).unwrap();
        let mut est = Estimator::new(64);
        let mut last = None;
        for i in 0..80u64 {
            let t = 10_000_000_000 + i * INTERVAL;
            let tuple = TimestampTuple { seq: i as u32 + 1, t_master_ns: TimePointNs(t), t_slave_ns: slave.read(TimePointNs(t)).unwrap() };
            last = Some(est.update(tuple).unwrap().unwrap());
        }
        let w = last.unwrap().window_skew_ppm;
        prop_assert!((w - skew).abs() <= 0.01, "window {} vs {}", w, skew);
    }

    #[test]
    fn servo_corrects_against_a_fast_slave(offsets in vec(1i64..10_000_000, 2..100)) {
        let mut servo = PiServo::new(ServoConfig::default()).unwrap();
        prop_assert!(matches!(servo.sample(offsets[0], INTERVAL).unwrap(), ServoAction::Step(_)));
        for &o in &offsets[1..] {
            match servo.sample(o, INTERVAL).unwrap() {
                ServoAction::SetFreq(ppb) => prop_assert!(ppb <= 0, "offset {} gave {}", o, ppb),
                ServoAction::Step(_) => prop_assert!(false, "unexpected step"),
            }
        }
    }

    #[test]
    fn servo_integral_never_winds_up(
        max_freq in 1u64..1_000_000,
        offsets in vec(-10_000_000i64..10_000_000, 1..200),
    ) {
        let cfg = ServoConfig { max_freq_ppb: max_freq, ..ServoConfig::default() };
        let mut servo = PiServo::new(cfg).unwrap();
        let mut servo2 = servo.clone();
        for &o in &offsets {
            let a = servo.sample(o, INTERVAL).unwrap();
            prop_assert_eq!(a, servo2.sample(o, INTERVAL).unwrap());
            prop_assert!(servo.state().integral_ppb.abs() <= max_freq as f64);
            if let ServoAction::SetFreq(ppb) = a {
                prop_assert!(ppb.unsigned_abs() <= max_freq);
            }
        }
    }

    #[test]
    fn wire_round_trip(
        seq in any::<u32>(),
        tsf in any::<u64>(),
        master in any::<u64>(),
        extra in vec((any::<u32>(), any::<u64>()), 0..=255),
        sync in any::<bool>(),
    ) {
        let msg = if sync {
            Message::Sync(SyncMessage { seq, tsf_us: TsfTimestamp(tsf) })
        } else {
            Message::FollowUp(FollowUpMessage {
                seq,
                tsf_us: TsfTimestamp(tsf),
                master_time_ns: TimePointNs(master),
                extra: extra.iter().map(|&(s, m)| FollowUpEntry { seq: s, master_time_ns: TimePointNs(m) }).collect(),
            })
        };
        prop_assert_eq!(decode(&encode(&msg)), Ok(msg));
    }

    #[test]
    fn stats_match_brute_force(xs in vec(-1e6f64..1e6, 2..200), p in 0.0f64..=1.0) {
        let s = compute_stats(&xs).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let mut pair_sq = 0.0;
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                pair_sq += (xs[i] - xs[j]).powi(2);
            }
        }
        let var = pair_sq / (n * (n - 1.0));
        let scale = xs.iter().fold(1.0f64, |m, x| m.max(x.abs()));
        prop_assert!((s.mean - mean).abs() <= 1e-9 * scale);
        prop_assert!((s.sample_sigma - var.sqrt()).abs() <= 1e-9 * scale.max(var.sqrt()));
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(s.min, sorted[0]);
        prop_assert_eq!(s.max, *sorted.last().unwrap());
        let rank = p * (n - 1.0);
        let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
        let expected = sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64);
        prop_assert!((percentile(&sorted, p) - expected).abs() <= 1e-9 * scale);
    }

    #[test]
    fn trace_round_trip(rows in vec(
        (any::<Option<u64>>(), any::<u32>(), any::<u64>(), any::<u64>(), any::<i64>(),
         -1e4f64..1e4, -1e4f64..1e4, any::<u16>(), 0usize..5, any::<i64>(), any::<Option<i64>>()),
        0..50,
    )) {
        let phases = [None, Some(ServoPhase::Init), Some(ServoPhase::Stepping), Some(ServoPhase::Tracking), Some(ServoPhase::Locked)];
        let records: Vec<TraceRecord> = rows
            .into_iter()
            .map(|(tt, seq, tm, ts, off, sk, wsk, drop, ph, out, disc)| TraceRecord {
                true_time_ns: tt,
                seq,
                t_master_ns: tm,
                t_slave_ns: ts,
                offset_ns: off,
                skew_ppm: sk,
                window_skew_ppm: wsk,
                dropped_since_last: drop,
                servo_phase: phases[ph],
                servo_output_ppb: out,
                disciplined_offset_ns: disc,
            }.quantized())
            .collect();
        let mut buf = Vec::new();
        write_trace(&records, &mut buf).unwrap();
        prop_assert_eq!(read_trace(buf.as_slice()).unwrap(), records);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn servo_locks_within_fifty_samples(
        micro_ppm in -100_000_000i64..=100_000_000,
        offset in -50_000_000i64..50_000_000,
        seed in any::<u64>(),
    ) {
        let cfg = SimConfig {
            seed,
            slave_clock: ClockSpec { offset_ns: offset, skew_ppm: micro_ppm as f64 / 1e6 },
            sync_channel: ChannelModel::fixed(1_000),
            rx_latency_ns: 1_000,
            servo: Some(ServoConfig::default()),
            ..ideal_config(6.0)
        };
        let out = run_simulation(&cfg).unwrap();
        let row = &out.trace[49];
        prop_assert_eq!(row.servo_phase, Some(ServoPhase::Locked));
        prop_assert!(row.disciplined_offset_ns.unwrap().abs() < 50_000);
    }

    #[test]
    fn every_sync_pairs_without_loss(
        // bounded jitter: spread stays below one beacon interval, so SYNCs keep their order
        sync_mean in 1_000_000u64..50_000_000,
        sync_sigma in 0u64..20_000_000,
        followup in delay_channel(),
        every in 1u32..8,
        seed in any::<u64>(),
    ) {
        let cfg = SimConfig {
            seed,
            follow_up_every: every,
            sync_channel: ChannelModel {
                distribution: DelayDistribution::Uniform,
                ..ChannelModel::gaussian(sync_mean, sync_sigma)
            },
            followup_channel: followup,
            pairing_timeout_ns: 5_000_000_000,
            ..ideal_config(10.0)
        };
        let out = run_simulation(&cfg).unwrap();
        let seqs: Vec<u32> = out.trace.iter().map(|r| r.seq).collect();
        prop_assert_eq!(out.accounting.tuples, out.accounting.beacons);
        prop_assert_eq!(seqs, (1..=out.accounting.beacons as u32).collect::<Vec<_>>());
        prop_assert!(out.accounting.conserved());
    }

    #[test]
    fn seq_gaps_equal_injected_drops(drop in 0.0f64..0.6, seed in any::<u64>()) {
        let cfg = SimConfig { seed, sync_drop_prob: drop, ..ideal_config(20.0) };
        let out = run_simulation(&cfg).unwrap();
        let mut counted = 0u64;
        let mut prev = 0u32;
        for r in &out.trace {
            counted += (r.seq - prev - 1) as u64;
            prop_assert_eq!(r.dropped_since_last as u32, if prev == 0 { 0 } else { r.seq - prev - 1 });
            prev = r.seq;
        }
        counted += out.accounting.beacons - prev as u64;
        prop_assert_eq!(counted, out.accounting.sync_drops);
    }

    #[test]
    fn followup_delay_never_changes_estimates(followup in delay_channel(), seed in any::<u64>()) {
        let base = SimConfig {
            seed,
            slave_clock: ClockSpec { offset_ns: 1_000_000, skew_ppm: 42.0 },
            sync_channel: ChannelModel::gaussian(2_000_000, 500_000),
            sync_drop_prob: 0.1,
            // far beyond any generated delay, so no FOLLOW_UP arrives after its SYNC expired
            pairing_timeout_ns: 60_000_000_000,
            ..ideal_config(15.0)
        };
        let a = run_simulation(&base).unwrap();
        let b = run_simulation(&SimConfig { followup_channel: followup, ..base }).unwrap();
        let strip = |r: &TraceRecord| TraceRecord { true_time_ns: None, ..r.clone() };
        prop_assert_eq!(
            a.trace.iter().map(strip).collect::<Vec<_>>(),
            b.trace.iter().map(strip).collect::<Vec<_>>()
        );
    }

    #[test]
    fn deliveries_respect_causality_and_runs_repeat(sync in delay_channel(), seed in any::<u64>()) {
        let cfg = SimConfig { seed, sync_channel: sync, ..ideal_config(10.0) };
        let a = run_simulation(&cfg).unwrap();
        for r in &a.trace {
            // an ideal master's clock is true time
            prop_assert!(r.true_time_ns.unwrap() >= r.t_master_ns + sync.min_delay_ns);
        }
        let b = run_simulation(&cfg).unwrap();
        prop_assert_eq!(a.trace, b.trace);
    }
}
