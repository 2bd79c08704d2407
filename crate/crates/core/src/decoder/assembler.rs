//! Streaming reassembly of validated chunks into events.
//!
//! Every message is transmitted several times and the channel may reorder
//! or drop copies, so the same chunk arrives repeatedly and chunks of
//! neighbouring events of one type interleave. The reassembler keeps a few
//! open partial events per type and routes each chunk to the partial it
//! most plausibly extends.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::codec::ChannelConfig;
use crate::schema::{assemble_chunks, is_known_type, Assembly, Chunk, ChunkLayout, Event};

/// Open partial events kept per message type.
pub const MAX_PARTIALS_PER_TYPE: usize = 4;
/// Pushes without progress after which a partial event is abandoned.
pub const STALE_PUSHES: u64 = 96;
/// Pushes after its last sighting during which a repeat of a held chunk, or
/// of the chunk that completed a recent event, is treated as a late copy.
pub const TRAILING_HORIZON: u64 = 12;
/// Pushes during which re-assembling an identical event counts as a repeat.
pub const REPEAT_HORIZON: u64 = 48;
/// Completed events remembered for the two filters above.
const RECENT_EVENTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Span {
    first_index: usize,
    last_index: usize,
    first_ts: u64,
    last_ts: u64,
}

impl Span {
    fn merge(&mut self, o: &Span) {
        self.first_index = self.first_index.min(o.first_index);
        self.last_index = self.last_index.max(o.last_index);
        self.first_ts = self.first_ts.min(o.first_ts);
        self.last_ts = self.last_ts.max(o.last_ts);
    }
}

#[derive(Debug, Clone)]
struct Slot {
    payload: u32,
    span: Span,
    /// Equal to the same chunk of a recently completed event, so possibly
    /// a late copy of it.
    suspect: bool,
    first_push: u64,
    last_push: u64,
}

#[derive(Debug, Clone)]
struct Partial {
    msg_type: u32,
    slots: BTreeMap<u32, Slot>,
    serial: u64,
    last_push: u64,
}

#[derive(Debug, Clone)]
struct Completed {
    event: Event,
    msg_type: u32,
    seq: u32,
    payload: u32,
    chunks: BTreeMap<u32, u32>,
    /// Last sighting of the completing chunk.
    last_push: u64,
    completed_push: u64,
}

/// Two different payloads seen for the same chunk position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AmbiguityWarning {
    pub msg_type: u32,
    pub seq: u32,
    pub first: u32,
    pub second: u32,
    pub trace_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AssemblyStats {
    pub chunks: u64,
    pub duplicates: u64,
    pub trailing: u64,
    /// Chunks from reused-packet triples that matched no held slot.
    pub reused: u64,
    /// Chunks contradicting the newest chunk of an event still being sent.
    pub conflicts: u64,
    pub out_of_range: u64,
    pub completed: u64,
    pub repeats: u64,
    pub incomplete: u64,
    pub malformed: u64,
}

/// A reassembled event with the trace span of its contributing reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assembled {
    pub event: Event,
    pub first_index: usize,
    pub last_index: usize,
    pub first_ts: u64,
    pub last_ts: u64,
}

pub struct Reassembler {
    cfg: ChannelConfig,
    layout: ChunkLayout,
    partials: Vec<Partial>,
    recent: Vec<Completed>,
    next_serial: u64,
    pub stats: AssemblyStats,
    pub warnings: Vec<AmbiguityWarning>,
}

impl Reassembler {
    pub fn new(cfg: &ChannelConfig) -> Self {
        Self {
            cfg: *cfg,
            layout: ChunkLayout::for_config(cfg),
            partials: Vec::new(),
            recent: Vec::new(),
            next_serial: 0,
            stats: AssemblyStats::default(),
            warnings: Vec::new(),
        }
    }

    pub fn open_partials(&self) -> usize {
        self.partials.len()
    }

    /// Feeds one validated chunk seen at window push `push`. Returns an event
    /// when the chunk completes one.
    #[allow(clippy::too_many_arguments)]
    pub fn accept(
        &mut self,
        chunk: Chunk,
        push: u64,
        first_index: usize,
        last_index: usize,
        first_ts: u64,
        last_ts: u64,
    ) -> Option<Assembled> {
        let span = Span {
            first_index,
            last_index,
            first_ts,
            last_ts,
        };
        self.expire(push);
        if !is_known_type(chunk.msg_type)
            || chunk.seq as usize >= self.layout.type_chunk_limit(chunk.msg_type)
        {
            self.stats.out_of_range += 1;
            return None;
        }
        self.stats.chunks += 1;

        if self.merge_duplicate(&chunk, push, Some(&span)) {
            return None;
        }

        if let Some(c) = self.recent.iter_mut().find(|c| {
            c.msg_type == chunk.msg_type
                && c.seq == chunk.seq
                && c.payload == chunk.payload
                && push.saturating_sub(c.last_push) <= TRAILING_HORIZON
        }) {
            c.last_push = push;
            self.stats.trailing += 1;
            return None;
        }

        let suspect = self.is_suspect(&chunk, push);
        let target = self.pick_partial(&chunk, suspect, push);
        let pi = match target {
            Some(i) => i,
            // A late copy of a completed event's later chunk would only open
            // a partial that never completes.
            None if suspect && chunk.seq > 0 => {
                self.stats.trailing += 1;
                return None;
            }
            // A different payload for the chunk an event is still sending
            // cannot start the next event of the type yet.
            None if self.contested(&chunk, push) => {
                self.warn_conflict(&chunk, first_index);
                self.stats.conflicts += 1;
                return None;
            }
            None => {
                self.warn_conflict(&chunk, first_index);
                self.open(chunk.msg_type, push)
            }
        };
        let p = &mut self.partials[pi];
        p.slots.insert(
            chunk.seq,
            Slot {
                payload: chunk.payload,
                span,
                suspect,
                first_push: push,
                last_push: push,
            },
        );
        p.last_push = push;
        self.try_complete(pi, chunk.seq, push)
    }

    /// Feeds a chunk from a triple that reused another pair's packet. It may
    /// only confirm a chunk already held, never add one.
    pub fn confirm(&mut self, chunk: Chunk, push: u64) {
        if !self.merge_duplicate(&chunk, push, None) {
            self.stats.reused += 1;
        }
    }

    /// Newest partial first: a repeat of a chunk already held. A copy long
    /// after the last sighting belongs to a new event.
    fn merge_duplicate(&mut self, chunk: &Chunk, push: u64, span: Option<&Span>) -> bool {
        for p in self.partials.iter_mut().rev() {
            if p.msg_type != chunk.msg_type {
                continue;
            }
            if let Some(s) = p.slots.get_mut(&chunk.seq) {
                if s.payload == chunk.payload && push.saturating_sub(s.last_push) <= TRAILING_HORIZON {
                    if let Some(span) = span {
                        s.span.merge(span);
                    }
                    s.last_push = push;
                    p.last_push = push;
                    self.stats.duplicates += 1;
                    return true;
                }
            }
        }
        false
    }

    fn warn_conflict(&mut self, chunk: &Chunk, trace_index: usize) {
        if let Some(prev) = self.partials.iter().rev().find_map(|p| {
            (p.msg_type == chunk.msg_type)
                .then(|| p.slots.get(&chunk.seq))
                .flatten()
                .filter(|s| s.payload != chunk.payload)
        }) {
            self.warnings.push(AmbiguityWarning {
                msg_type: chunk.msg_type,
                seq: chunk.seq,
                first: prev.payload,
                second: chunk.payload,
                trace_index,
            });
        }
    }

    fn contested(&self, chunk: &Chunk, push: u64) -> bool {
        self.partials.iter().any(|p| {
            p.msg_type == chunk.msg_type
                && p.slots.last_key_value().is_some_and(|(&seq, s)| {
                    seq == chunk.seq
                        && s.payload != chunk.payload
                        && push.saturating_sub(s.last_push) <= TRAILING_HORIZON
                })
        })
    }

    fn is_suspect(&self, chunk: &Chunk, push: u64) -> bool {
        self.recent.iter().any(|c| {
            c.msg_type == chunk.msg_type
                && c.chunks.get(&chunk.seq) == Some(&chunk.payload)
                && push.saturating_sub(c.completed_push) <= REPEAT_HORIZON
        })
    }

    /// A chunk that is not itself suspect first replaces a conflicting
    /// suspect slot (newest partial first). Otherwise prefers the partial
    /// whose highest sequence number is the largest one below the chunk's
    /// (more filled slots, then newer, break ties), else the newest partial
    /// with the slot free. Chunks are sent in order, so a partial whose later
    /// chunks were first seen long ago is not extended.
    fn pick_partial(&self, chunk: &Chunk, suspect: bool, push: u64) -> Option<usize> {
        let fits = |p: &Partial| {
            p.msg_type == chunk.msg_type
                && p.slots
                    .range(chunk.seq + 1..)
                    .all(|(_, s)| push.saturating_sub(s.first_push) <= TRAILING_HORIZON)
        };
        if !suspect {
            let replace = self.partials.iter().rposition(|p| {
                fits(p) && p.slots.get(&chunk.seq).is_some_and(|s| s.suspect)
            });
            if replace.is_some() {
                return replace;
            }
        }
        let mut below: Option<((u32, usize), usize)> = None;
        let mut newest_free = None;
        for (i, p) in self.partials.iter().enumerate() {
            if !fits(p) || p.slots.contains_key(&chunk.seq) {
                continue;
            }
            newest_free = Some(i);
            if let Some((&max, _)) = p.slots.last_key_value() {
                let score = (max, p.slots.len());
                if max < chunk.seq && below.is_none_or(|(m, _)| score >= m) {
                    below = Some((score, i));
                }
            }
        }
        below.map(|(_, i)| i).or(newest_free)
    }

    fn open(&mut self, msg_type: u32, push: u64) -> usize {
        let same: Vec<usize> = (0..self.partials.len())
            .filter(|&i| self.partials[i].msg_type == msg_type)
            .collect();
        if same.len() >= MAX_PARTIALS_PER_TYPE {
            self.partials.remove(same[0]);
            self.stats.incomplete += 1;
        }
        self.partials.push(Partial {
            msg_type,
            slots: BTreeMap::new(),
            serial: self.next_serial,
            last_push: push,
        });
        self.next_serial += 1;
        self.partials.len() - 1
    }

    fn try_complete(&mut self, pi: usize, seq: u32, push: u64) -> Option<Assembled> {
        let p = &self.partials[pi];
        let prefix: BTreeMap<u32, u32> = p
            .slots
            .iter()
            .enumerate()
            .take_while(|(i, (&s, _))| *i as u32 == s)
            .map(|(_, (&s, slot))| (s, slot.payload))
            .collect();
        let assembled = match assemble_chunks(p.msg_type, &prefix, &self.cfg) {
            Ok(Assembly::Complete(e)) => e,
            Ok(Assembly::Incomplete { .. }) => return None,
            Err(_) => {
                self.partials.remove(pi);
                self.stats.malformed += 1;
                return None;
            }
        };
        let p = self.partials.remove(pi);
        let n = prefix.len() as u32;
        let mut span = p.slots[&0].span;
        for (_, s) in p.slots.range(..n) {
            span.merge(&s.span);
        }
        // Older partials of the same type can no longer complete in order.
        let before = self.partials.len();
        self.partials
            .retain(|q| q.msg_type != p.msg_type || q.serial > p.serial);
        self.stats.incomplete += (before - self.partials.len()) as u64;
        let slot = &p.slots[&seq];
        let repeat = self.recent.iter_mut().find(|c| {
            c.event == assembled && push.saturating_sub(c.completed_push) <= REPEAT_HORIZON
        });
        if let Some(c) = repeat {
            c.completed_push = push;
            c.last_push = push;
            self.stats.repeats += 1;
            return None;
        }
        if self.recent.len() == RECENT_EVENTS {
            self.recent.remove(0);
        }
        self.recent.push(Completed {
            event: assembled.clone(),
            msg_type: p.msg_type,
            seq,
            payload: slot.payload,
            chunks: prefix,
            last_push: push,
            completed_push: push,
        });
        self.stats.completed += 1;
        Some(Assembled {
            event: assembled,
            first_index: span.first_index,
            last_index: span.last_index,
            first_ts: span.first_ts,
            last_ts: span.last_ts,
        })
    }

    fn expire(&mut self, push: u64) {
        let before = self.partials.len();
        self.partials
            .retain(|p| push.saturating_sub(p.last_push) <= STALE_PUSHES);
        self.stats.incomplete += (before - self.partials.len()) as u64;
    }

    /// Abandons all open partial events.
    pub fn finish(&mut self) {
        self.stats.incomplete += self.partials.len() as u64;
        self.partials.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::event_chunks;

    fn cfg() -> ChannelConfig {
        ChannelConfig::new(16).unwrap()
    }

    fn marker(id: &str, n: u32) -> Event {
        Event::Marker {
            id: id.into(),
            call_count: n,
        }
    }

    fn feed(r: &mut Reassembler, chunks: &[Chunk], push: &mut u64) -> Vec<Event> {
        let mut out = Vec::new();
        for c in chunks {
            *push += 1;
            if let Some(a) = r.accept(*c, *push, *push as usize, *push as usize, 0, 0) {
                out.push(a.event);
            }
        }
        out
    }

    fn repeated(e: &Event, reps: usize) -> Vec<Chunk> {
        event_chunks(e, &cfg())
            .unwrap()
            .into_iter()
            .flat_map(|c| std::iter::repeat_n(c, reps))
            .collect()
    }

    #[test]
    fn consecutive_identical_chunks_of_distinct_events() {
        // Two markers share chunks 0..=2 and differ only in the count.
        let mut r = Reassembler::new(&cfg());
        let mut push = 0;
        let mut stream = repeated(&marker("loop", 1), 4);
        stream.extend(repeated(&marker("loop", 2), 4));
        let got = feed(&mut r, &stream, &mut push);
        assert_eq!(got, vec![marker("loop", 1), marker("loop", 2)]);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn identical_events_back_to_back() {
        let e = Event::ObjectFree { object_id: 5 };
        let mut r = Reassembler::new(&cfg());
        let mut push = 0;
        assert_eq!(feed(&mut r, &repeated(&e, 4), &mut push).len(), 1);
        // the next free of the same id arrives after the horizon
        push += REPEAT_HORIZON + 1;
        assert_eq!(feed(&mut r, &repeated(&e, 4), &mut push).len(), 1);
    }

    #[test]
    fn late_copy_after_a_newer_event_is_not_reemitted() {
        let a = Event::ObjectFree { object_id: 1 };
        let b = Event::ObjectFree { object_id: 2 };
        let ca = event_chunks(&a, &cfg()).unwrap()[0];
        let cb = event_chunks(&b, &cfg()).unwrap()[0];
        let mut r = Reassembler::new(&cfg());
        let mut push = 0;
        let got = feed(&mut r, &[ca, ca, cb, ca, cb, cb, ca], &mut push);
        assert_eq!(got, vec![a, b]);
    }

    #[test]
    fn interleaved_reorder_of_neighbours() {
        let a = marker("f", 10);
        let b = marker("f", 11);
        let ca = event_chunks(&a, &cfg()).unwrap();
        let cb = event_chunks(&b, &cfg()).unwrap();
        let mut stream = Vec::new();
        for c in &ca {
            stream.extend([*c; 3]);
        }
        // last copy of a's final chunk arrives after b's first chunk
        stream.push(cb[0]);
        stream.push(*ca.last().unwrap());
        for c in &cb {
            stream.extend([*c; 3]);
        }
        let mut r = Reassembler::new(&cfg());
        let mut push = 0;
        assert_eq!(feed(&mut r, &stream, &mut push), vec![a, b]);
    }

    #[test]
    fn conflict_with_live_chunk_dropped_and_warns() {
        let c = cfg();
        let mut r = Reassembler::new(&c);
        let mut push = 0;
        let info = Event::MailboxInfo {
            virtual_base: 0x7F00_0000_0000,
            pid: 1,
        };
        let mut chunks = event_chunks(&info, &c).unwrap();
        let mut bogus = chunks[1];
        bogus.payload ^= 0xFF;
        chunks.insert(2, bogus);
        let got = feed(&mut r, &chunks, &mut push);
        assert_eq!(got, vec![info]);
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.warnings[0].seq, 1);
        assert_eq!((r.stats.conflicts, r.open_partials()), (1, 0));
    }

    #[test]
    fn out_of_range_and_unknown_chunks_ignored() {
        let mut r = Reassembler::new(&cfg());
        let mut push = 0;
        let junk = [
            Chunk {
                msg_type: 2,
                seq: 6,
                payload: 1,
            },
            Chunk {
                msg_type: 9,
                seq: 0,
                payload: 1,
            },
        ];
        assert!(feed(&mut r, &junk, &mut push).is_empty());
        assert_eq!(r.stats.out_of_range, 2);
        assert_eq!(r.open_partials(), 0);
    }

    #[test]
    fn stale_partials_expire() {
        let mut r = Reassembler::new(&cfg());
        let mut push = 0;
        let chunks = event_chunks(&marker("x", 1), &cfg()).unwrap();
        feed(&mut r, &chunks[..1], &mut push);
        push += STALE_PUSHES + 1;
        feed(&mut r, &chunks[1..], &mut push);
        assert_eq!(r.stats.incomplete, 1);
        assert_eq!(r.stats.completed, 0);
    }

    #[test]
    fn span_covers_all_contributing_reads() {
        let c = cfg();
        let mut r = Reassembler::new(&c);
        let e = Event::ObjectAlloc {
            object_id: 1,
            virtual_addr: 0x1000,
            size_bytes: 64,
        };
        let chunks = event_chunks(&e, &c).unwrap();
        let mut done = None;
        for (i, ch) in chunks.iter().enumerate() {
            done = r.accept(*ch, i as u64, 10 * i + 5, 10 * i + 7, 0, 1);
        }
        let a = done.unwrap();
        assert_eq!(a.first_index, 5);
        assert_eq!(a.last_index, 10 * (chunks.len() - 1) + 7);
    }

    #[test]
    fn malformed_marker_length_dropped() {
        let mut r = Reassembler::new(&cfg());
        let mut push = 0;
        let bad = Chunk {
            msg_type: 1,
            seq: 0,
            payload: 0x00FF,
        };
        feed(&mut r, &[bad], &mut push);
        assert_eq!(r.stats.malformed, 1);
        assert_eq!(r.open_partials(), 0);
    }
}
