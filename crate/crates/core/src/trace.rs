//! CSV experiment traces.
//!
//! Line 1 is the format tag `rbis-trace-v1`, line 2 the column names, then one
//! row per accepted tuple in emission order. Nanosecond fields are decimal
//! integers, ppm fields carry exactly six decimals, and fields that do not
//! apply (true time and true offset in live mode) are left empty.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::servo::ServoPhase;

pub const TRACE_VERSION: &str = "rbis-trace-v1";

pub const COLUMNS: [&str; 11] = [
    "true_time_ns",
    "seq",
    "t_master_ns",
    "t_slave_ns",
    "offset_ns",
    "skew_ppm",
    "window_skew_ppm",
    "dropped_since_last",
    "servo_phase",
    "servo_output_ppb",
    "disciplined_offset_ns",
];

const SERVO_OFF: &str = "off";

/// Rounds a ppm value to the six decimals stored in traces.
pub fn quantize_ppm(ppm: f64) -> f64 {
    (ppm * 1e6).round() / 1e6
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// Simulation only.
    pub true_time_ns: Option<u64>,
    pub seq: u32,
    pub t_master_ns: u64,
    pub t_slave_ns: u64,
    pub offset_ns: i64,
    pub skew_ppm: f64,
    pub window_skew_ppm: f64,
    pub dropped_since_last: u16,
    /// `None` when the servo is disabled.
    pub servo_phase: Option<ServoPhase>,
    pub servo_output_ppb: i64,
    /// Slave clock minus master clock at the SYNC reception instant. Simulation only.
    pub disciplined_offset_ns: Option<i64>,
}

impl TraceRecord {
    /// Rounds the ppm fields to their stored precision.
    pub fn quantized(mut self) -> Self {
        self.skew_ppm = quantize_ppm(self.skew_ppm);
        self.window_skew_ppm = quantize_ppm(self.window_skew_ppm);
        self
    }

    fn to_fields(&self) -> [String; 11] {
        let opt = |v: Option<String>| v.unwrap_or_default();
        [
            opt(self.true_time_ns.map(|v| v.to_string())),
            self.seq.to_string(),
            self.t_master_ns.to_string(),
            self.t_slave_ns.to_string(),
            self.offset_ns.to_string(),
            format!("{:.6}", self.skew_ppm),
            format!("{:.6}", self.window_skew_ppm),
            self.dropped_since_last.to_string(),
            self.servo_phase.map_or(SERVO_OFF, |p| p.as_str()).to_string(),
            self.servo_output_ppb.to_string(),
            opt(self.disciplined_offset_ns.map(|v| v.to_string())),
        ]
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a trace file: expected `{TRACE_VERSION}` on line 1, found `{0}`")]
    Version(String),
    #[error("unexpected column header `{0}`")]
    Header(String),
    #[error("row {row} (line {line}): {reason}")]
    MalformedRow { row: usize, line: u64, reason: String },
}

impl From<csv::Error> for TraceError {
    fn from(e: csv::Error) -> Self {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => TraceError::Io(io),
            other => TraceError::Io(io::Error::other(format!("{other:?}"))),
        }
    }
}

pub fn write_trace<W: Write>(records: &[TraceRecord], mut out: W) -> Result<(), TraceError> {
    writeln!(out, "{TRACE_VERSION}")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(COLUMNS)?;
    for r in records {
        w.write_record(r.to_fields())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_file(records: &[TraceRecord], path: &Path) -> Result<(), TraceError> {
    write_trace(records, BufWriter::new(File::create(path)?))
}

/// Incremental trace writer, for daemons that produce rows as they go.
pub struct TraceWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(mut out: W) -> Result<Self, TraceError> {
        writeln!(out, "{TRACE_VERSION}")?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        inner.write_record(COLUMNS)?;
        Ok(TraceWriter { inner })
    }

    pub fn write(&mut self, record: &TraceRecord) -> Result<(), TraceError> {
        self.inner.write_record(record.to_fields())?;
        self.inner.flush()?;
        Ok(())
    }
}

fn parse<T: FromStr>(field: &str, name: &str) -> Result<T, String> {
    field.parse().map_err(|_| format!("bad {name} `{field}`"))
}

fn parse_opt<T: FromStr>(field: &str, name: &str) -> Result<Option<T>, String> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse(field, name).map(Some)
    }
}

fn parse_ppm(field: &str, name: &str) -> Result<f64, String> {
    let v: f64 = parse(field, name)?;
    if !v.is_finite() {
        return Err(format!("bad {name} `{field}`"));
    }
    Ok(v)
}

fn parse_row(rec: &csv::StringRecord) -> Result<TraceRecord, String> {
    if rec.len() != COLUMNS.len() {
        return Err(format!("expected {} fields, found {}", COLUMNS.len(), rec.len()));
    }
    let f = |i: usize| &rec[i];
    Ok(TraceRecord {
        true_time_ns: parse_opt(f(0), COLUMNS[0])?,
        seq: parse(f(1), COLUMNS[1])?,
        t_master_ns: parse(f(2), COLUMNS[2])?,
        t_slave_ns: parse(f(3), COLUMNS[3])?,
        offset_ns: parse(f(4), COLUMNS[4])?,
        skew_ppm: parse_ppm(f(5), COLUMNS[5])?,
        window_skew_ppm: parse_ppm(f(6), COLUMNS[6])?,
        dropped_since_last: parse(f(7), COLUMNS[7])?,
        servo_phase: match f(8) {
            SERVO_OFF => None,
            other => Some(other.parse::<ServoPhase>()?),
        },
        servo_output_ppb: parse(f(9), COLUMNS[9])?,
        disciplined_offset_ns: parse_opt(f(10), COLUMNS[10])?,
    })
}

pub fn read_trace<R: Read>(input: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input.read_line(&mut first)?;
    let first = first.trim_end_matches(['\r', '\n']);
    if first != TRACE_VERSION {
        return Err(TraceError::Version(first.to_string()));
    }

    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = rdr.headers()?.clone();
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(TraceError::Header(header.iter().collect::<Vec<_>>().join(",")));
    }

    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        // csv counts lines from the column header; the version tag adds one.
        let rec = rec.map_err(|e| TraceError::MalformedRow {
            row,
            line: e.position().map_or(0, |p| p.line() + 1),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() + 1);
        records.push(parse_row(&rec).map_err(|reason| TraceError::MalformedRow { row, line, reason })?);
    }
    Ok(records)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    read_trace(File::open(path)?)
}
