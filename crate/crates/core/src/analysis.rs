//! Trace analysis driven by decoded events: regions of interest between
//! markers, per-object traffic, and plot-ready data files.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::codec::LINE_BYTES;
use crate::decoder::{DecodedEvent, ObjectRegistry};
use crate::error::Result;
use crate::schema::Event;
use crate::trace::{Cmd, TraceRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoiSegment {
    pub marker_id: String,
    pub call_count: u32,
    /// Trace positions `[start_index, end_index)`.
    pub start_index: usize,
    pub end_index: usize,
    pub start_ts: u64,
    pub end_ts: u64,
    pub reads: usize,
    pub writes: usize,
}

impl RoiSegment {
    pub fn label(&self) -> String {
        format!("{}:{}", self.marker_id, self.call_count)
    }
}

/// Segments delimited by consecutive markers with the same id; the last
/// segment of each id runs to the end of the trace. Sorted by id, then
/// by start position.
pub fn roi_segments(events: &[DecodedEvent], trace: &[TraceRecord]) -> Vec<RoiSegment> {
    let mut by_id: BTreeMap<&str, Vec<(usize, u32)>> = BTreeMap::new();
    for e in events {
        if let Event::Marker { id, call_count } = &e.event {
            by_id.entry(id).or_default().push((e.first_index, *call_count));
        }
    }
    let ts_at = |i: usize| trace.get(i).map_or_else(|| trace.last().map_or(0, |r| r.timestamp_ns), |r| r.timestamp_ns);
    let mut out = Vec::new();
    for (id, mut marks) in by_id {
        marks.sort();
        for (k, &(start, call_count)) in marks.iter().enumerate() {
            let end = marks.get(k + 1).map_or(trace.len(), |m| m.0).max(start);
            let span = &trace[start.min(trace.len())..end.min(trace.len())];
            out.push(RoiSegment {
                marker_id: id.to_string(),
                call_count,
                start_index: start,
                end_index: end,
                start_ts: ts_at(start),
                end_ts: ts_at(end),
                reads: span.iter().filter(|r| r.cmd.is_read()).count(),
                writes: span.iter().filter(|r| r.cmd == Cmd::MemWr).count(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObjectStats {
    pub object_id: u16,
    pub size_bytes: u64,
    pub reads: u64,
    pub writes: u64,
    /// Distinct cache lines touched, in bytes.
    pub bytes_touched: u64,
    pub first_access: Option<usize>,
    pub last_access: Option<usize>,
}

/// Attributes every record to the object live at its position and accumulates counters.
pub fn object_stats(registry: &ObjectRegistry, trace: &[TraceRecord]) -> Vec<ObjectStats> {
    let objs = registry.objects();
    let mut stats: Vec<ObjectStats> = objs
        .iter()
        .map(|o| ObjectStats {
            object_id: o.object_id,
            size_bytes: o.size_bytes,
            reads: 0,
            writes: 0,
            bytes_touched: 0,
            first_access: None,
            last_access: None,
        })
        .collect();
    let mut lines: Vec<HashSet<u64>> = vec![HashSet::new(); objs.len()];
    if objs.is_empty() {
        return stats;
    }
    for (i, r) in trace.iter().enumerate() {
        let Some(k) = registry.lookup(i, r.addr.0) else {
            continue;
        };
        let s = &mut stats[k];
        if r.cmd.is_read() {
            s.reads += 1;
        } else {
            s.writes += 1;
        }
        lines[k].insert(r.addr.line());
        s.first_access.get_or_insert(i);
        s.last_access = Some(i);
    }
    for (s, l) in stats.iter_mut().zip(&lines) {
        s.bytes_touched = l.len() as u64 * LINE_BYTES;
    }
    stats
}

/// Paths written by [`emit_plot_data`].
#[derive(Debug, Clone, Serialize)]
pub struct PlotFiles {
    pub series: Vec<PathBuf>,
    pub annotations: PathBuf,
}

fn series_name(cmd: Cmd) -> &'static str {
    match cmd {
        Cmd::MemRd => "memrd.csv",
        Cmd::MemRdData => "memrddata.csv",
        Cmd::MemWr => "memwr.csv",
    }
}

/// Writes one `timestamp_ns,addr` series per command kind and an
/// annotation file with markers and object allocations.
pub fn emit_plot_data(
    trace: &[TraceRecord],
    events: &[DecodedEvent],
    registry: &ObjectRegistry,
    dir: &Path,
) -> Result<PlotFiles> {
    std::fs::create_dir_all(dir)?;
    let mut series = Vec::new();
    for cmd in Cmd::ALL {
        let path = dir.join(series_name(cmd));
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "timestamp_ns,addr")?;
        for r in trace.iter().filter(|r| r.cmd == cmd) {
            writeln!(w, "{},{}", r.timestamp_ns, r.addr.0)?;
        }
        w.flush()?;
        series.push(path);
    }

    let annotations = dir.join("annotations.csv");
    let mut w = BufWriter::new(File::create(&annotations)?);
    writeln!(w, "timestamp_ns,trace_index,kind,label,addr_lo,addr_hi")?;
    let mut rows: Vec<(u64, usize, String)> = Vec::new();
    for e in events {
        match &e.event {
            Event::Marker { id, call_count } => rows.push((
                e.first_ts,
                e.first_index,
                format!("marker,{id}:{call_count},,"),
            )),
            Event::ObjectFree { object_id } => rows.push((
                e.first_ts,
                e.first_index,
                format!("free,obj{object_id},,"),
            )),
            _ => {}
        }
    }
    for o in registry.objects() {
        rows.push((
            o.alloc_ts,
            o.alloc_index,
            format!("alloc,obj{},{},{}", o.object_id, o.phys_start, o.phys_end),
        ));
    }
    rows.sort();
    for (ts, idx, rest) in rows {
        writeln!(w, "{ts},{idx},{rest}")?;
    }
    w.flush()?;
    Ok(PlotFiles {
        series,
        annotations,
    })
}
