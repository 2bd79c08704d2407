//! Transmitter side: a process-level session that owns a mailbox window and
//! turns events into flush/read/flush request triplets.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{assemble_address, ChannelConfig, PhysAddr, LINE_BYTES};
use crate::error::{Error, Result};
use crate::schema::{preamble_sequence, serialize_event, Event, Message};

pub const DEFAULT_REPETITIONS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestOp {
    FlushLine,
    ReadLine,
}

/// Ground-truth tag carried alongside each request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestOrigin {
    Metadata,
    Payload,
}

/// One application-level memory operation, before the memory channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AppRequest {
    pub addr: PhysAddr,
    pub op: RequestOp,
    pub origin: RequestOrigin,
}

/// Where the mailbox window is placed in physical memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MailboxPlacement {
    /// A window-sized region carved out of `region`, separate from program data.
    Dedicated { region: Range<u64> },
    /// Window overlaid on live program data; reads leave the data untouched.
    Overlay { data: Range<u64> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionOptions {
    pub pid: u32,
    /// Virtual base minus physical base of the mailbox.
    pub vp_offset: u64,
    pub repetitions: u32,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            pid: 1,
            vp_offset: 0x7F5A_0000_0000,
            repetitions: DEFAULT_REPETITIONS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderSession {
    cfg: ChannelConfig,
    phys_base: PhysAddr,
    virtual_base: u64,
    pid: u32,
    repetitions: u32,
    capacity_overhead: u64,
    emitted: u64,
    preamble_sent: bool,
}

/// Aligned window bases whose window intersects (`overlay`) or fits inside `range`.
fn aligned_slots(range: &Range<u64>, window: u64, overlay: bool) -> Option<Range<u64>> {
    if range.start >= range.end {
        return None;
    }
    let (first, last) = if overlay {
        (range.start / window, (range.end - 1) / window)
    } else {
        let first = range.start.div_ceil(window);
        let end_slot = range.end / window;
        if end_slot == 0 || first >= end_slot {
            return None;
        }
        (first, end_slot - 1)
    };
    // the window must also fit below 2^64
    let last = last.min(u64::MAX / window - 1);
    (first <= last).then_some(first..last + 1)
}

impl EncoderSession {
    pub fn open(
        cfg: ChannelConfig,
        placement: &MailboxPlacement,
        seed: u64,
        opts: SessionOptions,
    ) -> Result<EncoderSession> {
        if opts.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be >= 1".into()));
        }
        let window = cfg.window_bytes();
        let (range, overlay) = match placement {
            MailboxPlacement::Dedicated { region } => (region, false),
            MailboxPlacement::Overlay { data } => (data, true),
        };
        let slots = aligned_slots(range, window, overlay).ok_or_else(|| {
            Error::Allocation(format!(
                "no {window:#x}-aligned window {} {:#x}..{:#x}",
                if overlay { "overlapping" } else { "inside" },
                range.start,
                range.end
            ))
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slot = rng.random_range(slots);
        let phys_base = slot * window;
        Ok(EncoderSession {
            cfg,
            phys_base: PhysAddr(phys_base),
            virtual_base: phys_base.wrapping_add(opts.vp_offset),
            pid: opts.pid,
            repetitions: opts.repetitions,
            capacity_overhead: if overlay { 0 } else { window },
            emitted: 0,
            preamble_sent: false,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn phys_base(&self) -> PhysAddr {
        self.phys_base
    }

    pub fn virtual_base(&self) -> u64 {
        self.virtual_base
    }

    pub fn pid(&self) -> u32 {
        self.pid
    }

    pub fn repetitions(&self) -> u32 {
        self.repetitions
    }

    /// Extra physical memory reserved for the mailbox (zero when overlaid).
    pub fn capacity_overhead(&self) -> u64 {
        self.capacity_overhead
    }

    pub fn emitted(&self) -> u64 {
        self.emitted
    }

    pub fn window(&self) -> Range<u64> {
        self.phys_base.0..self.phys_base.0 + self.cfg.window_bytes()
    }

    /// Physical address of a virtual address, under the session's single
    /// contiguous mapping.
    pub fn virt_to_phys(&self, vaddr: u64) -> u64 {
        vaddr.wrapping_sub(self.virtual_base.wrapping_sub(self.phys_base.0))
    }

    pub fn phys_to_virt(&self, paddr: u64) -> u64 {
        paddr.wrapping_add(self.virtual_base.wrapping_sub(self.phys_base.0))
    }

    fn emit_messages(&mut self, msgs: &[Message]) -> Result<Vec<AppRequest>> {
        let mut out = Vec::with_capacity(msgs.len() * 9 * self.repetitions as usize);
        for m in msgs {
            for _ in 0..self.repetitions {
                for p in m.packets() {
                    let addr = assemble_address(self.phys_base, p, &self.cfg)?;
                    for op in [RequestOp::FlushLine, RequestOp::ReadLine, RequestOp::FlushLine] {
                        out.push(AppRequest {
                            addr,
                            op,
                            origin: RequestOrigin::Metadata,
                        });
                    }
                }
            }
        }
        self.emitted += out.len() as u64;
        Ok(out)
    }

    pub fn emit_preamble(&mut self) -> Result<Vec<AppRequest>> {
        if self.preamble_sent || self.emitted > 0 {
            return Err(Error::Ordering(
                "the preamble must be the first transmission of a session".into(),
            ));
        }
        let msgs = preamble_sequence(&self.cfg);
        let out = self.emit_messages(&msgs)?;
        self.preamble_sent = true;
        Ok(out)
    }

    pub fn send_event(&mut self, e: &Event) -> Result<Vec<AppRequest>> {
        let msgs = serialize_event(e, &self.cfg)?;
        self.emit_messages(&msgs)
    }

    pub fn send_mailbox_info(&mut self) -> Result<Vec<AppRequest>> {
        if !self.preamble_sent {
            return Err(Error::Ordering("mailbox info sent before the preamble".into()));
        }
        let e = Event::MailboxInfo {
            virtual_base: self.virtual_base,
            pid: self.pid,
        };
        self.send_event(&e)
    }

    /// Preamble followed by mailbox info.
    pub fn start(&mut self) -> Result<Vec<AppRequest>> {
        let mut out = self.emit_preamble()?;
        out.extend(self.send_mailbox_info()?);
        Ok(out)
    }

    /// Ordinary program reads of every line in a physical range.
    pub fn payload_reads(&mut self, range: Range<u64>) -> Vec<AppRequest> {
        let start = range.start & !(LINE_BYTES - 1);
        let out: Vec<AppRequest> = (start..range.end)
            .step_by(LINE_BYTES as usize)
            .map(|a| AppRequest {
                addr: PhysAddr(a),
                op: RequestOp::ReadLine,
                origin: RequestOrigin::Payload,
            })
            .collect();
        self.emitted += out.len() as u64;
        out
    }
}

/// A named code marker whose every send carries an incrementing call count.
#[derive(Debug, Clone)]
pub struct MarkerHandle {
    id: String,
    calls: u32,
}

impl MarkerHandle {
    pub fn new(id: impl Into<String>) -> Result<MarkerHandle> {
        let id = id.into();
        Event::Marker {
            id: id.clone(),
            call_count: 0,
        }
        .validate()?;
        Ok(MarkerHandle { id, calls: 0 })
    }

    pub fn calls(&self) -> u32 {
        self.calls
    }

    pub fn next_event(&mut self) -> Event {
        let e = Event::Marker {
            id: self.id.clone(),
            call_count: self.calls,
        };
        self.calls += 1;
        e
    }

    pub fn send(&mut self, session: &mut EncoderSession) -> Result<Vec<AppRequest>> {
        let e = self.next_event();
        session.send_event(&e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::extract_packet;

    const GIB: u64 = 1 << 30;
    const MIB: u64 = 1 << 20;

    fn cfg16() -> ChannelConfig {
        ChannelConfig::new(16).unwrap()
    }

    fn dedicated() -> MailboxPlacement {
        MailboxPlacement::Dedicated {
            region: GIB..2 * GIB,
        }
    }

    fn session(reps: u32) -> EncoderSession {
        EncoderSession::open(
            cfg16(),
            &dedicated(),
            11,
            SessionOptions {
                repetitions: reps,
                ..Default::default()
            },
        )
        .unwrap()
    }

    fn reads(reqs: &[AppRequest]) -> usize {
        reqs.iter().filter(|r| r.op == RequestOp::ReadLine).count()
    }

    #[test]
    fn dedicated_base_is_aligned_and_deterministic() {
        for seed in 0..20 {
            let s = EncoderSession::open(cfg16(), &dedicated(), seed, SessionOptions::default()).unwrap();
            assert_eq!(s.phys_base().0 % (4 * MIB), 0);
            assert!(s.window().start >= GIB && s.window().end <= 2 * GIB);
            assert_eq!(s.capacity_overhead(), 4 * MIB);
            let again = EncoderSession::open(cfg16(), &dedicated(), seed, SessionOptions::default()).unwrap();
            assert_eq!(s.phys_base(), again.phys_base());
        }
    }

    #[test]
    fn overlay_intersects_data_without_overhead() {
        let data = 0x1234_5000..0x1234_5000 + 10 * MIB;
        let s = EncoderSession::open(
            cfg16(),
            &MailboxPlacement::Overlay { data: data.clone() },
            3,
            SessionOptions::default(),
        )
        .unwrap();
        let w = s.window();
        assert!(w.start < data.end && data.start < w.end);
        assert_eq!(s.capacity_overhead(), 0);
        // a large window still overlays a small object
        let big = EncoderSession::open(
            ChannelConfig::new(24).unwrap(),
            &MailboxPlacement::Overlay { data: data.clone() },
            3,
            SessionOptions::default(),
        )
        .unwrap();
        assert!(big.window().contains(&data.start));
    }

    #[test]
    fn impossible_alignment_is_allocation_error() {
        let err = EncoderSession::open(
            cfg16(),
            &MailboxPlacement::Dedicated {
                region: MIB..3 * MIB,
            },
            0,
            SessionOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Allocation(_)));
        assert!(EncoderSession::open(
            cfg16(),
            &MailboxPlacement::Overlay { data: 5..5 },
            0,
            SessionOptions::default()
        )
        .is_err());
    }

    #[test]
    fn preamble_read_counts() {
        assert_eq!(reads(&session(1).emit_preamble().unwrap()), 150);
        assert_eq!(reads(&session(4).emit_preamble().unwrap()), 600);
    }

    #[test]
    fn preamble_must_come_first() {
        let mut s = session(1);
        s.send_event(&Event::ObjectFree { object_id: 1 }).unwrap();
        assert!(matches!(s.emit_preamble(), Err(Error::Ordering(_))));
        let mut s = session(1);
        assert!(matches!(s.send_mailbox_info(), Err(Error::Ordering(_))));
        s.emit_preamble().unwrap();
        assert!(matches!(s.emit_preamble(), Err(Error::Ordering(_))));
    }

    #[test]
    fn event_read_counts_and_bracketing() {
        for reps in [1, 3, 4] {
            let mut s = session(reps);
            let free = s.send_event(&Event::ObjectFree { object_id: 1 }).unwrap();
            assert_eq!(reads(&free), reps as usize * 3);
            s.emit_preamble().unwrap_err();
            let mut s = session(reps);
            s.emit_preamble().unwrap();
            let info = s.send_mailbox_info().unwrap();
            assert_eq!(reads(&info), reps as usize * 18);
            for t in info.chunks(3) {
                assert_eq!(t[0].op, RequestOp::FlushLine);
                assert_eq!(t[1].op, RequestOp::ReadLine);
                assert_eq!(t[2].op, RequestOp::FlushLine);
                assert!(t.iter().all(|r| r.addr == t[0].addr));
                assert!(s.window().contains(&t[1].addr.0));
                assert_eq!(t[1].addr.0 % 64, 0);
            }
        }
    }

    #[test]
    fn message_order_is_a_b_crc_per_repetition() {
        let mut s = session(2);
        let reqs = s.send_event(&Event::ObjectFree { object_id: 7 }).unwrap();
        let pk: Vec<u32> = reqs
            .iter()
            .filter(|r| r.op == RequestOp::ReadLine)
            .map(|r| extract_packet(r.addr, s.phys_base(), s.config()).unwrap().0)
            .collect();
        let m = &serialize_event(&Event::ObjectFree { object_id: 7 }, s.config()).unwrap()[0];
        assert_eq!(pk, vec![m.a.0, m.b.0, m.crc.0, m.a.0, m.b.0, m.crc.0]);
    }

    #[test]
    fn marker_counts_increment() {
        let mut s = session(1);
        let mut m = MarkerHandle::new("M1").unwrap();
        for k in 0..10 {
            assert_eq!(
                m.next_event(),
                Event::Marker {
                    id: "M1".into(),
                    call_count: k
                }
            );
        }
        m.send(&mut s).unwrap();
        assert_eq!(m.calls(), 11);
        assert!(MarkerHandle::new("").is_err());
    }

    #[test]
    fn vp_translation() {
        let s = EncoderSession::open(
            cfg16(),
            &dedicated(),
            5,
            SessionOptions {
                vp_offset: 0x7F5A_0000_0000,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(s.virtual_base() - s.phys_base().0, 0x7F5A_0000_0000);
        assert_eq!(s.virt_to_phys(s.phys_to_virt(GIB + 64)), GIB + 64);
    }
}
