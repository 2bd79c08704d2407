//! Two-phase recovery of events from a memory trace.
//!
//! Phase 1 knows neither the mailbox location nor its address format. For
//! each candidate config, every read is mapped to the naturally aligned
//! window that would contain it and its packet is pushed into a sliding
//! window kept for that `(config, window)` candidate. A candidate becomes a
//! mailbox once enough distinct preamble messages validate in it.
//!
//! Phase 2 feeds reads inside a detected mailbox to its own window, checks
//! CRC triples involving the newest packet and reassembles typed chunks.
//! Reads elsewhere keep feeding phase 1, so later sessions are found too.

pub mod assembler;
pub mod registry;
pub mod window;

use std::num::NonZeroUsize;

use lru::LruCache;
use rustc_hash::FxBuildHasher;
use serde::{Deserialize, Serialize};

use crate::codec::{unscramble, ChannelConfig, Packet, OFFSET_BITS};
use crate::error::{Error, Result};
use crate::schema::{is_known_type, preamble_index, Chunk, Event, PREAMBLE_MESSAGES};
use crate::serde_hex;
use crate::trace::TraceRecord;

pub use assembler::{AmbiguityWarning, AssemblyStats, Reassembler};
pub use registry::{phys_to_virt, virt_to_phys, vp_offset, ObjectLifetime, ObjectRegistry};
pub use window::{triple_check, PacketWindow, TripleMatch, TRIPLES_PER_PUSH, WINDOW_PACKETS};

/// Distinct preamble messages required to accept a mailbox.
pub const DEFAULT_DETECT_THRESHOLD: usize = 5;
/// Phase-1 candidate windows kept before the least recently used is dropped.
pub const DEFAULT_MAX_CANDIDATES: usize = 1 << 20;

/// An event recovered from the trace, positioned by the reads that carried it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedEvent {
    #[serde(flatten)]
    pub event: Event,
    /// Physical base of the mailbox the event arrived through.
    #[serde(with = "serde_hex")]
    pub mailbox: u64,
    pub first_index: usize,
    pub last_index: usize,
    pub first_ts: u64,
    pub last_ts: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MailboxDetection {
    pub config: ChannelConfig,
    #[serde(with = "serde_hex")]
    pub phys_base: u64,
    /// Trace index of the read that completed detection.
    pub detected_at: usize,
    /// Earliest trace index among the validated preamble reads.
    pub first_index: usize,
    pub preamble_messages: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Preamble,
    Chunk,
    Noise,
}

/// A CRC-validated pair seen inside a detected mailbox.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ValidatedPair {
    #[serde(with = "serde_hex")]
    pub mailbox: u64,
    pub a: u32,
    pub b: u32,
    pub kind: PairKind,
    pub first_index: usize,
    pub last_index: usize,
    /// Window push count within the mailbox when the pair validated.
    pub push: u64,
}

#[derive(Debug, Clone)]
pub struct DecoderOptions {
    pub candidates: Vec<ChannelConfig>,
    pub detect_threshold: usize,
    pub max_candidates: usize,
    /// Phase 1 stops once this many mailboxes are known.
    pub max_mailboxes: usize,
    /// Keep every validated pair in the output.
    pub record_pairs: bool,
}

impl Default for DecoderOptions {
    fn default() -> Self {
        Self {
            candidates: ChannelConfig::all_candidates(),
            detect_threshold: DEFAULT_DETECT_THRESHOLD,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            max_mailboxes: 16,
            record_pairs: false,
        }
    }
}

impl DecoderOptions {
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::InvalidParams("no candidate configs".into()));
        }
        if self.candidates.len() > u8::MAX as usize {
            return Err(Error::InvalidParams("too many candidate configs".into()));
        }
        if !(1..=PREAMBLE_MESSAGES).contains(&self.detect_threshold) {
            return Err(Error::InvalidParams(format!(
                "detect threshold must be in 1..={PREAMBLE_MESSAGES}"
            )));
        }
        if self.max_candidates == 0 {
            return Err(Error::InvalidParams("max_candidates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DecodeReport {
    pub records: usize,
    pub reads: usize,
    /// Reads routed to a detected mailbox.
    pub mailbox_reads: usize,
    /// Validated pairs inside mailboxes, by kind.
    pub validated_pairs: u64,
    pub preamble_pairs: u64,
    pub chunk_pairs: u64,
    pub noise_pairs: u64,
    pub events: usize,
    pub assembly: AssemblyStats,
    pub ambiguities: Vec<AmbiguityWarning>,
    pub mailboxes: Vec<MailboxDetection>,
    /// Phase-1 pairs that validated, preamble or not.
    pub candidate_pairs: u64,
    pub candidate_evictions: u64,
    pub peak_candidates: usize,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub events: Vec<DecodedEvent>,
    pub report: DecodeReport,
    pub pairs: Vec<ValidatedPair>,
}

#[inline]
fn packet_at(addr: u64, cfg: &ChannelConfig) -> Packet {
    let raw = Packet(((addr >> OFFSET_BITS) & cfg.packet_mask()) as u32);
    unscramble(raw, cfg)
}

struct Candidate {
    window: PacketWindow,
    hits: u64,
    first_index: usize,
}

struct Mailbox {
    det: MailboxDetection,
    cfg: ChannelConfig,
    shift: u32,
    window: PacketWindow,
    asm: Reassembler,
    pushes: u64,
}

impl Mailbox {
    fn new(det: MailboxDetection, window: PacketWindow) -> Self {
        let cfg = det.config;
        Self {
            shift: cfg.window_shift(),
            asm: Reassembler::new(&cfg),
            cfg,
            det,
            window,
            pushes: 0,
        }
    }

    fn owns(&self, addr: u64) -> bool {
        addr >> self.shift == self.det.phys_base >> self.shift
    }
}

/// Streaming decoder. Feed records in trace order with [`Decoder::push`].
pub struct Decoder {
    opts: DecoderOptions,
    shifts: Vec<u32>,
    table: LruCache<(u8, u64), Candidate, FxBuildHasher>,
    mailboxes: Vec<Mailbox>,
    report: DecodeReport,
    pairs: Vec<ValidatedPair>,
    scratch: Vec<TripleMatch>,
    next_index: usize,
}

impl Decoder {
    pub fn new(opts: DecoderOptions) -> Result<Self> {
        opts.validate()?;
        let cap = NonZeroUsize::new(opts.max_candidates).unwrap();
        Ok(Self {
            shifts: opts.candidates.iter().map(|c| c.window_shift()).collect(),
            table: LruCache::with_hasher(cap, FxBuildHasher),
            opts,
            mailboxes: Vec::new(),
            report: DecodeReport::default(),
            pairs: Vec::new(),
            scratch: Vec::with_capacity(16),
            next_index: 0,
        })
    }

    /// Starts directly in phase 2 for a known mailbox.
    pub fn with_mailbox(opts: DecoderOptions, det: MailboxDetection) -> Result<Self> {
        let mut d = Decoder::new(opts)?;
        d.report.mailboxes.push(det.clone());
        let w = PacketWindow::new(&det.config);
        d.mailboxes.push(Mailbox::new(det, w));
        Ok(d)
    }

    pub fn mailboxes(&self) -> impl Iterator<Item = &MailboxDetection> {
        self.mailboxes.iter().map(|m| &m.det)
    }

    pub fn candidate_count(&self) -> usize {
        self.table.len()
    }

    /// Skips `n` records without decoding them, keeping trace indices aligned.
    pub fn skip(&mut self, n: usize) {
        self.next_index += n;
        self.report.records += n;
    }

    /// Decodes one record; completed events are appended to `out`.
    pub fn push(&mut self, rec: &TraceRecord, out: &mut Vec<DecodedEvent>) {
        let index = self.next_index;
        self.next_index += 1;
        self.report.records += 1;
        if !rec.cmd.is_read() {
            return;
        }
        self.report.reads += 1;
        let addr = rec.addr.0;
        if let Some(mi) = self.mailboxes.iter().position(|m| m.owns(addr)) {
            self.report.mailbox_reads += 1;
            self.phase2(mi, addr, index, rec.timestamp_ns, out);
            return;
        }
        if self.mailboxes.len() < self.opts.max_mailboxes {
            self.phase1(addr, index, rec.timestamp_ns);
        }
    }

    fn phase1(&mut self, addr: u64, index: usize, ts: u64) {
        for ci in 0..self.opts.candidates.len() {
            let cfg = self.opts.candidates[ci];
            let key = (ci as u8, addr >> self.shifts[ci]);
            if !self.table.contains(&key) {
                let fresh = Candidate {
                    window: PacketWindow::new(&cfg),
                    hits: 0,
                    first_index: usize::MAX,
                };
                if self.table.push(key, fresh).is_some() {
                    self.report.candidate_evictions += 1;
                }
                self.report.peak_candidates = self.report.peak_candidates.max(self.table.len());
            }
            let cand = self.table.get_mut(&key).unwrap();
            cand.window.push(packet_at(addr, &cfg), index, ts);
            self.scratch.clear();
            cand.window.check_newest(&mut self.scratch);
            if self.scratch.is_empty() {
                continue;
            }
            self.report.candidate_pairs += self.scratch.len() as u64;
            for m in &self.scratch {
                if let Some(k) = preamble_index(m.a, m.b, &cfg) {
                    cand.hits |= 1 << k;
                    cand.first_index = cand.first_index.min(m.first_index);
                }
            }
            let found = cand.hits.count_ones() as usize;
            if found >= self.opts.detect_threshold {
                let (_, cand) = self.table.pop_entry(&key).unwrap();
                let det = MailboxDetection {
                    config: cfg,
                    phys_base: key.1 << self.shifts[ci],
                    detected_at: index,
                    first_index: cand.first_index,
                    preamble_messages: found,
                };
                self.report.mailboxes.push(det.clone());
                self.mailboxes.push(Mailbox::new(det, cand.window));
                return;
            }
        }
    }

    fn phase2(&mut self, mi: usize, addr: u64, index: usize, ts: u64, out: &mut Vec<DecodedEvent>) {
        let m = &mut self.mailboxes[mi];
        m.window.push(packet_at(addr, &m.cfg), index, ts);
        m.pushes += 1;
        self.scratch.clear();
        m.window.check_newest(&mut self.scratch);
        for t in &self.scratch {
            self.report.validated_pairs += 1;
            let kind = if preamble_index(t.a, t.b, &m.cfg).is_some() {
                self.report.preamble_pairs += 1;
                PairKind::Preamble
            } else {
                let chunk = Chunk::from_pair(t.a, t.b, &m.cfg);
                if is_known_type(chunk.msg_type) && t.reused {
                    self.report.chunk_pairs += 1;
                    m.asm.confirm(chunk, m.pushes);
                    PairKind::Chunk
                } else if is_known_type(chunk.msg_type) {
                    self.report.chunk_pairs += 1;
                    if let Some(a) = m.asm.accept(
                        chunk,
                        m.pushes,
                        t.first_index,
                        t.last_index,
                        t.first_ts,
                        t.last_ts,
                    ) {
                        out.push(DecodedEvent {
                            event: a.event,
                            mailbox: m.det.phys_base,
                            first_index: a.first_index,
                            last_index: a.last_index,
                            first_ts: a.first_ts,
                            last_ts: a.last_ts,
                        });
                        self.report.events += 1;
                    }
                    PairKind::Chunk
                } else {
                    self.report.noise_pairs += 1;
                    PairKind::Noise
                }
            };
            if self.opts.record_pairs {
                self.pairs.push(ValidatedPair {
                    mailbox: m.det.phys_base,
                    a: t.a.0,
                    b: t.b.0,
                    kind,
                    first_index: t.first_index,
                    last_index: t.last_index,
                    push: m.pushes,
                });
            }
        }
    }

    pub fn finish(mut self, events: Vec<DecodedEvent>) -> DecodeOutput {
        for m in &mut self.mailboxes {
            m.asm.finish();
            let s = &m.asm.stats;
            let t = &mut self.report.assembly;
            t.chunks += s.chunks;
            t.duplicates += s.duplicates;
            t.trailing += s.trailing;
            t.reused += s.reused;
            t.conflicts += s.conflicts;
            t.out_of_range += s.out_of_range;
            t.completed += s.completed;
            t.repeats += s.repeats;
            t.incomplete += s.incomplete;
            t.malformed += s.malformed;
            self.report.ambiguities.append(&mut m.asm.warnings);
        }
        DecodeOutput {
            events,
            report: self.report,
            pairs: self.pairs,
        }
    }
}

/// Phase 1 alone: the first mailbox found in `trace`, if any.
pub fn detect_mailbox(
    trace: &[TraceRecord],
    candidates: &[ChannelConfig],
    threshold: usize,
) -> Result<Option<MailboxDetection>> {
    let mut d = Decoder::new(DecoderOptions {
        candidates: candidates.to_vec(),
        detect_threshold: threshold,
        max_mailboxes: 1,
        ..DecoderOptions::default()
    })?;
    let mut sink = Vec::new();
    for r in trace {
        d.push(r, &mut sink);
        if let Some(det) = d.mailboxes().next() {
            return Ok(Some(det.clone()));
        }
    }
    Ok(None)
}

/// Phase 2 alone: decodes the mailbox in `det` from the read after detection.
pub fn decode_stream(trace: &[TraceRecord], det: &MailboxDetection) -> Result<DecodeOutput> {
    let mut d = Decoder::with_mailbox(
        DecoderOptions {
            candidates: vec![det.config],
            max_mailboxes: 0,
            ..DecoderOptions::default()
        },
        det.clone(),
    )?;
    let start = (det.detected_at + 1).min(trace.len());
    d.skip(start);
    let mut events = Vec::new();
    for r in &trace[start..] {
        d.push(r, &mut events);
    }
    Ok(d.finish(events))
}

/// Full decode: detection and event recovery for every mailbox in the trace.
pub fn decode_trace(trace: &[TraceRecord], opts: DecoderOptions) -> Result<DecodeOutput> {
    let mut d = Decoder::new(opts)?;
    let mut events = Vec::new();
    for r in trace {
        d.push(r, &mut events);
    }
    Ok(d.finish(events))
}
