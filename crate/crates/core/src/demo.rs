//! Scripted end-to-end experiments: a program emits metadata and payload
//! traffic, the channel mangles it, the decoder recovers events, and the
//! result is scored against ground truth.
//!
//! - `functions`: entry and exit markers around a small call tree
//! - `roi`: a 10-iteration loop tagged with marker `M1`
//! - `objects`: 1, 4 and 16 MiB objects allocated, read in full, then freed

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::analysis::{emit_plot_data, object_stats, roi_segments, ObjectStats, RoiSegment};
use crate::channel::{run_channel, trace_index_of_requests, ChannelOutput, ChannelParams};
use crate::codec::ChannelConfig;
use crate::decoder::{decode_trace, vp_offset, DecodeReport, DecodedEvent, DecoderOptions, ObjectRegistry};
use crate::encoder::{AppRequest, EncoderSession, MailboxPlacement, MarkerHandle, RequestOp, SessionOptions};
use crate::error::{Error, Result};
use crate::schema::Event;
use crate::trace::{write_trace, write_truth};

pub const DEMO_SEED: u64 = 7;

const MIB: u64 = 1 << 20;
const GIB: u64 = 1 << 30;
/// Program data lives inside the background address space.
const DATA_BASE: u64 = 256 * MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoKind {
    Functions,
    Roi,
    Objects,
}

impl DemoKind {
    pub const ALL: [DemoKind; 3] = [DemoKind::Functions, DemoKind::Roi, DemoKind::Objects];

    pub fn as_str(self) -> &'static str {
        match self {
            DemoKind::Functions => "functions",
            DemoKind::Roi => "roi",
            DemoKind::Objects => "objects",
        }
    }
}

impl fmt::Display for DemoKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DemoKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        DemoKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown demo {s:?} (functions, roi, objects)"))
    }
}

/// Request stream of one program run, with the span of every event.
pub struct Program {
    pub session: EncoderSession,
    pub requests: Vec<AppRequest>,
    pub sent: Vec<(Event, Range<usize>)>,
}

impl Program {
    /// Opens a session in a dedicated region above the data and sends the
    /// preamble and mailbox info.
    pub fn start(cfg: ChannelConfig, seed: u64, opts: SessionOptions) -> Result<Program> {
        let placement = MailboxPlacement::Dedicated {
            region: 4 * GIB..8 * GIB,
        };
        let mut session = EncoderSession::open(cfg, &placement, seed, opts)?;
        let mut requests = session.emit_preamble()?;
        let start = requests.len();
        requests.extend(session.send_mailbox_info()?);
        let info = Event::MailboxInfo {
            virtual_base: session.virtual_base(),
            pid: session.pid(),
        };
        Ok(Program {
            session,
            sent: vec![(info, start..requests.len())],
            requests,
        })
    }

    pub fn send(&mut self, e: Event) -> Result<()> {
        let start = self.requests.len();
        self.requests.extend(self.session.send_event(&e)?);
        self.sent.push((e, start..self.requests.len()));
        Ok(())
    }

    pub fn mark(&mut self, m: &mut MarkerHandle) -> Result<()> {
        let e = m.next_event();
        self.send(e)
    }

    pub fn read(&mut self, range: Range<u64>) {
        let reads = self.session.payload_reads(range);
        self.requests.extend(reads);
    }

    /// Earliest trace index among the delivered reads of each sent event.
    pub fn trace_starts(&self, out: &ChannelOutput) -> Vec<Option<usize>> {
        let idx = trace_index_of_requests(out, self.requests.len());
        self.sent
            .iter()
            .map(|(_, span)| {
                span.clone()
                    .filter(|&i| self.requests[i].op == RequestOp::ReadLine)
                    .filter_map(|i| idx[i])
                    .min()
            })
            .collect()
    }
}

/// A program object with its ground-truth placement.
#[derive(Debug, Clone, Serialize)]
pub struct TrueObject {
    pub object_id: u16,
    pub phys: Range<u64>,
    pub virtual_addr: u64,
}

pub struct DemoRun {
    pub kind: DemoKind,
    pub seed: u64,
    pub config: ChannelConfig,
    pub params: ChannelParams,
    pub program: Program,
    pub objects: Vec<TrueObject>,
    pub output: ChannelOutput,
}

fn functions_program(p: &mut Program) -> Result<()> {
    let mut main_in = MarkerHandle::new("main>")?;
    let mut main_out = MarkerHandle::new("main<")?;
    let mut init_in = MarkerHandle::new("init>")?;
    let mut init_out = MarkerHandle::new("init<")?;
    let mut work_in = MarkerHandle::new("work>")?;
    let mut work_out = MarkerHandle::new("work<")?;
    p.mark(&mut main_in)?;
    p.mark(&mut init_in)?;
    p.read(DATA_BASE..DATA_BASE + 64 * 1024);
    p.mark(&mut init_out)?;
    for k in 0..3u64 {
        p.mark(&mut work_in)?;
        let base = DATA_BASE + MIB + k * 256 * 1024;
        p.read(base..base + 32 * 1024);
        p.mark(&mut work_out)?;
    }
    p.mark(&mut main_out)
}

/// NTIMES iterations of a triad-style sweep over three arrays.
const NTIMES: u32 = 10;
const ARRAY_BYTES: u64 = 16 * 1024;

fn roi_program(p: &mut Program) -> Result<()> {
    let mut m1 = MarkerHandle::new("M1")?;
    let arrays = [DATA_BASE, DATA_BASE + MIB, DATA_BASE + 2 * MIB];
    for _ in 0..NTIMES {
        p.mark(&mut m1)?;
        for a in arrays {
            p.read(a..a + ARRAY_BYTES);
        }
    }
    Ok(())
}

pub const OBJECT_SIZES: [u64; 3] = [MIB, 4 * MIB, 16 * MIB];

fn objects_program(p: &mut Program) -> Result<Vec<TrueObject>> {
    let mut objects = Vec::new();
    let mut next = DATA_BASE;
    for (i, &size) in OBJECT_SIZES.iter().enumerate() {
        let phys = next..next + size;
        next += size + MIB;
        let virtual_addr = p.session.phys_to_virt(phys.start);
        let object_id = i as u16 + 1;
        p.send(Event::ObjectAlloc {
            object_id,
            virtual_addr,
            size_bytes: size,
        })?;
        objects.push(TrueObject {
            object_id,
            phys,
            virtual_addr,
        });
    }
    for o in &objects {
        p.read(o.phys.clone());
    }
    for o in &objects {
        p.send(Event::ObjectFree {
            object_id: o.object_id,
        })?;
    }
    Ok(objects)
}

pub fn demo_config() -> ChannelConfig {
    ChannelConfig::new(16).expect("16-bit packets").with_randomizer()
}

/// Builds the program for `kind` and runs it through the adversarial channel.
pub fn build_demo(kind: DemoKind, seed: u64) -> Result<DemoRun> {
    let config = demo_config();
    let mut program = Program::start(config, seed, SessionOptions::default())?;
    let objects = match kind {
        DemoKind::Functions => {
            functions_program(&mut program)?;
            Vec::new()
        }
        DemoKind::Roi => {
            roi_program(&mut program)?;
            Vec::new()
        }
        DemoKind::Objects => objects_program(&mut program)?,
    };
    let params = ChannelParams::adversarial(seed);
    let output = run_channel(&program.requests, &params)?;
    Ok(DemoRun {
        kind,
        seed,
        config,
        params,
        program,
        objects,
        output,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AttributionScore {
    /// Reads inside a live object's true range during its true lifetime.
    pub in_range_reads: usize,
    pub correct: usize,
    /// Reads attributed to an object they do not belong to.
    pub misattributed: usize,
}

impl AttributionScore {
    pub fn accuracy(&self) -> f64 {
        if self.in_range_reads == 0 {
            1.0
        } else {
            self.correct as f64 / self.in_range_reads as f64
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoSummary {
    pub demo: DemoKind,
    pub seed: u64,
    pub config: ChannelConfig,
    pub trace_records: usize,
    pub events_sent: usize,
    pub events_decoded: usize,
    /// Sent events missing from the decoded list.
    pub missing: usize,
    /// Decoded events that were never sent.
    pub false_events: usize,
    pub mailbox_detected: bool,
    pub mailbox_base_correct: bool,
    pub vp_offset_true: i64,
    pub vp_offset_decoded: Option<i64>,
    pub markers: usize,
    /// Markers whose decoded position equals their first delivered read.
    pub markers_exact: usize,
    pub segments: Vec<RoiSegment>,
    pub objects: Vec<ObjectStats>,
    pub attribution: Option<AttributionScore>,
}

pub struct DemoResult {
    pub run: DemoRun,
    pub events: Vec<DecodedEvent>,
    pub report: DecodeReport,
    pub registry: ObjectRegistry,
    pub summary: DemoSummary,
}

/// Index of the first delivered read of each sent event, in trace order.
fn truth_events(run: &DemoRun) -> Vec<(Event, Option<usize>)> {
    let starts = run.program.trace_starts(&run.output);
    run.program
        .sent
        .iter()
        .map(|(e, _)| e.clone())
        .zip(starts)
        .collect()
}

fn score_attribution(run: &DemoRun, registry: &ObjectRegistry) -> AttributionScore {
    let truth = truth_events(run);
    let pos = |pred: &dyn Fn(&Event) -> bool| truth.iter().find(|(e, _)| pred(e)).and_then(|t| t.1);
    let lifetimes: Vec<(u16, Range<u64>, usize, usize)> = run
        .objects
        .iter()
        .map(|o| {
            let id = o.object_id;
            let alloc = pos(&|e| matches!(e, Event::ObjectAlloc { object_id, .. } if *object_id == id));
            let free = pos(&|e| matches!(e, Event::ObjectFree { object_id } if *object_id == id));
            (
                id,
                o.phys.clone(),
                alloc.unwrap_or(usize::MAX),
                free.unwrap_or(usize::MAX),
            )
        })
        .collect();
    let mut s = AttributionScore {
        in_range_reads: 0,
        correct: 0,
        misattributed: 0,
    };
    for (i, r) in run.output.trace.iter().enumerate() {
        if !r.cmd.is_read() {
            continue;
        }
        let want = lifetimes
            .iter()
            .find(|(_, range, a, f)| range.contains(&r.addr.0) && (*a..*f).contains(&i))
            .map(|l| l.0);
        let got = registry.attribute(i, r.addr.0).map(|o| o.object_id);
        if want.is_some() {
            s.in_range_reads += 1;
            if got == want {
                s.correct += 1;
            }
        }
        if got.is_some() && got != want {
            s.misattributed += 1;
        }
    }
    s
}

/// Decodes a demo run and scores it.
pub fn evaluate(run: DemoRun) -> Result<DemoResult> {
    let out = decode_trace(&run.output.trace, DecoderOptions::default())?;
    let events = out.events;
    let registry = ObjectRegistry::from_events(&events);
    let truth = truth_events(&run);

    let decoded: Vec<&Event> = events.iter().map(|d| &d.event).collect();
    let missing = truth.iter().filter(|(e, _)| !decoded.contains(&e)).count();
    let false_events = decoded
        .iter()
        .filter(|e| !truth.iter().any(|(t, _)| t == **e))
        .count();
    let det = out.report.mailboxes.first();
    let session = &run.program.session;
    let mut markers = 0;
    let mut markers_exact = 0;
    for (e, start) in &truth {
        if let Event::Marker { .. } = e {
            markers += 1;
            if events.iter().any(|d| d.event == *e && Some(d.first_index) == *start) {
                markers_exact += 1;
            }
        }
    }
    let segments = roi_segments(&events, &run.output.trace);
    let objects = object_stats(&registry, &run.output.trace);
    let attribution = (!run.objects.is_empty()).then(|| score_attribution(&run, &registry));
    let summary = DemoSummary {
        demo: run.kind,
        seed: run.seed,
        config: run.config,
        trace_records: run.output.trace.len(),
        events_sent: truth.len(),
        events_decoded: events.len(),
        missing,
        false_events,
        mailbox_detected: det.is_some(),
        mailbox_base_correct: det.is_some_and(|d| {
            d.phys_base == session.phys_base().0 && d.config == run.config
        }),
        vp_offset_true: session.virtual_base().wrapping_sub(session.phys_base().0) as i64,
        vp_offset_decoded: events.iter().find_map(vp_offset),
        markers,
        markers_exact,
        segments,
        objects,
        attribution,
    };
    Ok(DemoResult {
        run,
        events,
        report: out.report,
        registry,
        summary,
    })
}

pub fn run_demo(kind: DemoKind, seed: u64) -> Result<DemoResult> {
    evaluate(build_demo(kind, seed)?)
}

/// Writes the trace, ground truth, decoded events, report, summary and
/// plot data of a demo into `dir`.
pub fn write_demo(res: &DemoResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_trace(&res.run.output.trace, &dir.join("trace.csv"))?;
    write_truth(&res.run.output.truth, &dir.join("truth.csv"))?;
    crate::events_io::write_decoded(&res.events, &dir.join("events.jsonl"))?;
    let json = |v: &dyn erased::Json, name: &str| -> Result<()> {
        let text = v.to_json()?;
        std::fs::write(dir.join(name), text + "\n")?;
        Ok(())
    };
    json(&res.report, "report.json")?;
    json(&res.summary, "summary.json")?;
    emit_plot_data(&res.run.output.trace, &res.events, &res.registry, &dir.join("plot"))?;
    Ok(())
}

mod erased {
    use super::*;

    pub trait Json {
        fn to_json(&self) -> Result<String>;
    }

    impl<T: Serialize> Json for T {
        fn to_json(&self) -> Result<String> {
            serde_json::to_string_pretty(self).map_err(Error::from)
        }
    }
}
