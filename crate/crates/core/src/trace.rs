//! Memory trace records and the CSV files exchanged between pipeline stages.
//!
//! - trace: `timestamp_ns,cmd,addr_hex`; extra columns are ignored on read
//! - ground truth: `trace_index,origin`
//! - request stream: `seq,op,addr_hex,origin`

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::PhysAddr;
use crate::encoder::{AppRequest, RequestOp, RequestOrigin};
use crate::error::{Error, Result};
use crate::serde_hex::parse_hex;

/// Memory command kind as recorded by a bus logger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cmd {
    MemRd,
    MemRdData,
    MemWr,
}

impl Cmd {
    pub const ALL: [Cmd; 3] = [Cmd::MemRd, Cmd::MemRdData, Cmd::MemWr];

    pub fn is_read(self) -> bool {
        !matches!(self, Cmd::MemWr)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Cmd::MemRd => "MemRd",
            Cmd::MemRdData => "MemRdData",
            Cmd::MemWr => "MemWr",
        }
    }
}

impl fmt::Display for Cmd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Cmd {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "MemRd" => Ok(Cmd::MemRd),
            "MemRdData" => Ok(Cmd::MemRdData),
            "MemWr" => Ok(Cmd::MemWr),
            other => Err(format!("unknown command {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TraceRecord {
    pub timestamp_ns: u64,
    pub cmd: Cmd,
    pub addr: PhysAddr,
}

/// What produced a trace record, for scoring against decoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceOrigin {
    Metadata,
    Payload,
    Background,
    Prefetch,
}

impl TraceOrigin {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceOrigin::Metadata => "metadata",
            TraceOrigin::Payload => "payload",
            TraceOrigin::Background => "background",
            TraceOrigin::Prefetch => "prefetch",
        }
    }
}

impl FromStr for TraceOrigin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "metadata" => Ok(TraceOrigin::Metadata),
            "payload" => Ok(TraceOrigin::Payload),
            "background" => Ok(TraceOrigin::Background),
            "prefetch" => Ok(TraceOrigin::Prefetch),
            other => Err(format!("unknown origin {other:?}")),
        }
    }
}

/// Ground truth for one trace record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TruthEntry {
    pub origin: TraceOrigin,
    /// Index into the application request stream, for metadata and payload reads.
    pub app_index: Option<u32>,
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn check_header(path: &Path, rdr: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let headers = rdr.headers()?.clone();
    for (i, name) in expected.iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(parse_err(
                path,
                1,
                format!("expected header {}", expected.join(",")),
            ));
        }
    }
    Ok(())
}

pub fn read_trace_from<R: Read>(r: R, path: &Path) -> Result<Vec<TraceRecord>> {
    let mut rdr = reader(r);
    check_header(path, &mut rdr, &["timestamp_ns", "cmd", "addr_hex"])?;
    let mut out = Vec::new();
    let mut rec = csv::StringRecord::new();
    while rdr.read_record(&mut rec)? {
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, got {}", rec.len())));
        }
        let timestamp_ns = rec[0]
            .parse()
            .map_err(|e| parse_err(path, line, format!("bad timestamp {:?}: {e}", &rec[0])))?;
        let cmd = rec[1].parse().map_err(|e: String| parse_err(path, line, e))?;
        let addr = parse_hex(&rec[2]).map_err(|e| parse_err(path, line, e))?;
        out.push(TraceRecord {
            timestamp_ns,
            cmd,
            addr: PhysAddr(addr),
        });
    }
    Ok(out)
}

pub fn parse_trace(path: &Path) -> Result<Vec<TraceRecord>> {
    read_trace_from(BufReader::new(File::open(path)?), path)
}

pub fn write_trace_to<W: Write>(records: &[TraceRecord], w: W) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "timestamp_ns,cmd,addr_hex")?;
    for r in records {
        writeln!(w, "{},{},{:#x}", r.timestamp_ns, r.cmd, r.addr.0)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace(records: &[TraceRecord], path: &Path) -> Result<()> {
    write_trace_to(records, File::create(path)?)
}

pub fn write_truth(truth: &[TruthEntry], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "trace_index,origin")?;
    for (i, t) in truth.iter().enumerate() {
        writeln!(w, "{i},{}", t.origin.as_str())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truth(path: &Path) -> Result<Vec<TraceOrigin>> {
    let mut rdr = reader(BufReader::new(File::open(path)?));
    check_header(path, &mut rdr, &["trace_index", "origin"])?;
    let mut out = Vec::new();
    let mut rec = csv::StringRecord::new();
    while rdr.read_record(&mut rec)? {
        let line = rec.position().map_or(0, |p| p.line());
        let idx: usize = rec
            .get(0)
            .unwrap_or("")
            .parse()
            .map_err(|e| parse_err(path, line, format!("bad index: {e}")))?;
        if idx != out.len() {
            return Err(parse_err(path, line, format!("expected index {}", out.len())));
        }
        let origin = rec
            .get(1)
            .unwrap_or("")
            .parse()
            .map_err(|e: String| parse_err(path, line, e))?;
        out.push(origin);
    }
    Ok(out)
}

pub fn write_requests(reqs: &[AppRequest], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "seq,op,addr_hex,origin")?;
    for (i, r) in reqs.iter().enumerate() {
        let op = match r.op {
            RequestOp::FlushLine => "flush",
            RequestOp::ReadLine => "read",
        };
        let origin = match r.origin {
            RequestOrigin::Metadata => "metadata",
            RequestOrigin::Payload => "payload",
        };
        writeln!(w, "{i},{op},{:#x},{origin}", r.addr.0)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_requests(path: &Path) -> Result<Vec<AppRequest>> {
    let mut rdr = reader(BufReader::new(File::open(path)?));
    check_header(path, &mut rdr, &["seq", "op", "addr_hex", "origin"])?;
    let mut out = Vec::new();
    let mut rec = csv::StringRecord::new();
    while rdr.read_record(&mut rec)? {
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() < 4 {
            return Err(parse_err(path, line, "expected 4 fields"));
        }
        let op = match &rec[1] {
            "flush" => RequestOp::FlushLine,
            "read" => RequestOp::ReadLine,
            other => return Err(parse_err(path, line, format!("unknown op {other:?}"))),
        };
        let origin = match &rec[3] {
            "metadata" => RequestOrigin::Metadata,
            "payload" => RequestOrigin::Payload,
            other => return Err(parse_err(path, line, format!("unknown origin {other:?}"))),
        };
        let addr = parse_hex(&rec[2]).map_err(|e| parse_err(path, line, e))?;
        out.push(AppRequest {
            addr: PhysAddr(addr),
            op,
            origin,
        });
    }
    Ok(out)
}
