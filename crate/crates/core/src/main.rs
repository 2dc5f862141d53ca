use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use rbis::analyze::analyze;
use rbis::config::{self, BenchTarget, KvFile};
use rbis::live::{run_master, run_slave};
use rbis::sim::{rtt_bench, run_simulation, LinkPreset, RttReport};
use rbis::trace::{read_trace_file, write_trace, write_trace_file};

#[derive(Parser)]
#[command(name = "rbis", version, about = "Reference broadcast clock synchronization over beacons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a deterministic simulation and write its trace.
    Simulate {
        config: PathBuf,
        /// Trace file; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Summarize a trace file.
    Analyze { trace: PathBuf },
    /// Measure simulated round-trip latency of a channel or the link presets.
    BenchChannel { config: PathBuf },
    /// Run the UDP master daemon.
    Master { config: PathBuf },
    /// Run the UDP slave daemon.
    Slave {
        config: PathBuf,
        /// Apply servo corrections to the host realtime clock (needs CAP_SYS_TIME).
        #[arg(long)]
        steer_host_clock: bool,
    },
}

fn simulate(config_path: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = config::sim_config(KvFile::load(config_path)?)?;
    let outcome = run_simulation(&cfg)?;
    match out {
        Some(path) => write_trace_file(&outcome.trace, path).with_context(|| format!("writing {}", path.display()))?,
        None => write_trace(&outcome.trace, std::io::stdout().lock())?,
    }
    let a = outcome.accounting;
    eprintln!(
        "beacons {} tuples {} sync_drops {} followup_losses {} pairing_expiries {}",
        a.beacons, a.tuples, a.sync_drops, a.followup_losses, a.pairing_expiries
    );
    Ok(())
}

fn print_rtt(name: &str, target: Option<(f64, f64)>, r: &RttReport) {
    let s = &r.rtt_ms;
    let mut line = format!(
        "{name:<18} {:>8.3} ± {:<7.3} ms  (n={}, lost {}, p50 {:.3}, p95 {:.3}, p99 {:.3})",
        s.mean, s.sample_sigma, s.count, r.lost, s.p50, s.p95, s.p99
    );
    if let Some((m, sd)) = target {
        line += &format!("  target {m:.2} ± {sd:.2}: mean err {:.2}%, sigma err {:.2}%", s.mean_rel_err(m) * 100.0, s.sigma_rel_err(sd) * 100.0);
    }
    println!("{line}");
}

fn bench(config_path: &Path) -> Result<()> {
    let cfg = config::bench_config(KvFile::load(config_path)?)?;
    println!("{:<18} {:>8}   {:<7}", "link", "RTT mean", "sigma");
    let presets: Vec<LinkPreset> = match cfg.target {
        BenchTarget::AllPresets => LinkPreset::ALL.to_vec(),
        BenchTarget::Preset(p) => vec![p],
        BenchTarget::Custom(ch) => {
            print_rtt("custom", None, &rtt_bench(&ch, cfg.probes, cfg.seed)?);
            return Ok(());
        }
    };
    for p in presets {
        print_rtt(p.label(), Some(p.rtt_ms()), &rtt_bench(&p.one_way(), cfg.probes, cfg.seed)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let never = AtomicBool::new(false);
    match cli.command {
        Command::Simulate { config, out } => simulate(&config, out.as_deref()),
        Command::Analyze { trace } => {
            let records = read_trace_file(&trace).with_context(|| format!("reading {}", trace.display()))?;
            print!("{}", analyze(&records));
            Ok(())
        }
        Command::BenchChannel { config } => bench(&config),
        Command::Master { config } => {
            let cfg = config::master_config(KvFile::load(&config)?)?;
            let r = run_master(&cfg, &never)?;
            eprintln!("sent {} beacons, {} follow-ups", r.beacons, r.followups);
            Ok(())
        }
        Command::Slave { config, steer_host_clock } => {
            let mut cfg = config::slave_config(KvFile::load(&config)?)?;
            cfg.steer_host_clock = steer_host_clock;
            let stdout = std::io::stdout();
            let r = run_slave(&cfg, &never, |row| {
                let phase = row.servo_phase.map_or("off", |p| p.as_str());
                let _ = writeln!(
                    stdout.lock(),
                    "seq {} offset {} ns skew {:.6} ppm window {:.6} ppm dropped {} servo {} {} ppb",
                    row.seq, row.offset_ns, row.skew_ppm, row.window_skew_ppm, row.dropped_since_last, phase, row.servo_output_ppb
                );
            })?;
            let c = r.counters;
            eprintln!(
                "rows {} syncs {} duplicates {} expired {} evicted {} unmatched follow-ups {} malformed {}",
                r.rows, c.syncs_received, c.duplicate_syncs, c.pending_expired, c.pending_evicted, c.followups_unmatched, r.decode_errors
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rbis: error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
