//! Offline analysis of a recorded trace.

use std::collections::BTreeMap;
use std::fmt;

use crate::servo::ServoPhase;
use crate::stats::{compute_stats, SummaryMetrics};
use crate::trace::TraceRecord;

/// Offset increments between consecutive rows that are `seq_gap` beacons apart.
#[derive(Debug, Clone, PartialEq)]
pub struct GapRow {
    pub seq_gap: u32,
    pub count: usize,
    pub mean_increment_ns: f64,
    pub min_increment_ns: i64,
    pub max_increment_ns: i64,
    /// Mean increment divided by the single-interval mean increment.
    pub ratio_to_base: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceReport {
    pub rows: usize,
    pub offset_ns: Option<SummaryMetrics>,
    /// Instantaneous skew, first row excluded (it has no predecessor).
    pub skew_ppm: Option<SummaryMetrics>,
    pub window_skew_ppm: Option<SummaryMetrics>,
    pub gaps: Vec<GapRow>,
    pub base_increment_ns: Option<f64>,
    /// Row index of the first Locked sample.
    pub first_lock_row: Option<usize>,
    /// True offset from the first Locked row on.
    pub locked_offset_ns: Option<SummaryMetrics>,
}

pub fn analyze(trace: &[TraceRecord]) -> TraceReport {
    let offsets: Vec<f64> = trace.iter().map(|r| r.offset_ns as f64).collect();
    let skews: Vec<f64> = trace.iter().skip(1).map(|r| r.skew_ppm).collect();
    let window: Vec<f64> = trace.iter().skip(1).map(|r| r.window_skew_ppm).collect();

    let mut by_gap: BTreeMap<u32, Vec<i64>> = BTreeMap::new();
    for pair in trace.windows(2) {
        let gap = pair[1].seq.wrapping_sub(pair[0].seq);
        if gap == 0 {
            continue;
        }
        by_gap
            .entry(gap)
            .or_default()
            .push(pair[1].offset_ns - pair[0].offset_ns);
    }
    let mean = |v: &[i64]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
    let base = by_gap.get(&1).map(|v| mean(v));
    let gaps = by_gap
        .iter()
        .map(|(&seq_gap, incs)| {
            let m = mean(incs);
            GapRow {
                seq_gap,
                count: incs.len(),
                mean_increment_ns: m,
                min_increment_ns: *incs.iter().min().unwrap(),
                max_increment_ns: *incs.iter().max().unwrap(),
                ratio_to_base: base.filter(|b| *b != 0.0).map(|b| m / b),
            }
        })
        .collect();

    let first_lock_row = trace.iter().position(|r| r.servo_phase == Some(ServoPhase::Locked));
    let locked: Vec<f64> = first_lock_row
        .map(|i| {
            trace[i..]
                .iter()
                .filter_map(|r| r.disciplined_offset_ns.map(|v| v as f64))
                .collect()
        })
        .unwrap_or_default();

    TraceReport {
        rows: trace.len(),
        offset_ns: compute_stats(&offsets).ok(),
        skew_ppm: compute_stats(&skews).ok(),
        window_skew_ppm: compute_stats(&window).ok(),
        gaps,
        base_increment_ns: base,
        first_lock_row,
        locked_offset_ns: compute_stats(&locked).ok(),
    }
}

fn line(f: &mut fmt::Formatter<'_>, name: &str, unit: &str, s: &Option<SummaryMetrics>) -> fmt::Result {
    match s {
        Some(s) => writeln!(
            f,
            "{name:<18} mean {:>14.6} {unit}  sigma {:>12.6}  min {:>14.6}  max {:>14.6}  p95 {:>14.6}",
            s.mean, s.sample_sigma, s.min, s.max, s.p95
        ),
        None => writeln!(f, "{name:<18} (too few samples)"),
    }
}

impl fmt::Display for TraceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows: {}", self.rows)?;
        line(f, "offset", "ns ", &self.offset_ns)?;
        line(f, "skew", "ppm", &self.skew_ppm)?;
        line(f, "window skew", "ppm", &self.window_skew_ppm)?;
        if !self.gaps.is_empty() {
            writeln!(f, "offset increment by sequence gap:")?;
            writeln!(f, "  {:>5} {:>8} {:>14} {:>12} {:>12} {:>8}", "gap", "count", "mean ns", "min ns", "max ns", "ratio")?;
            for g in &self.gaps {
                let ratio = g.ratio_to_base.map_or("-".to_string(), |r| format!("{r:.3}"));
                writeln!(
                    f,
                    "  {:>5} {:>8} {:>14.3} {:>12} {:>12} {:>8}",
                    g.seq_gap, g.count, g.mean_increment_ns, g.min_increment_ns, g.max_increment_ns, ratio
                )?;
            }
        }
        match self.first_lock_row {
            Some(i) => {
                writeln!(f, "first locked row: {i}")?;
                line(f, "locked true offset", "ns ", &self.locked_offset_ns)?;
            }
            None => writeln!(f, "servo never locked")?,
        }
        Ok(())
    }
}
