//! Typed events and their serialization into two-packet messages.
//!
//! Every message carries one chunk. Packet A holds a type tag and a sequence
//! number, packet B holds the next slice of the event's big-endian byte
//! layout:
//!
//! | width | A = type \| seq | B = payload |
//! |-------|-----------------|-------------|
//! | 8     | 3 \| 5          | 1 byte      |
//! | 16    | 8 \| 8          | 2 bytes     |
//! | 24    | 12 \| 12        | 3 bytes     |
//! | 32    | 16 \| 16        | 4 bytes     |
//!
//! Event byte layouts:
//!
//! - `MailboxInfo`: virtual base `u64`, pid `u32` (6 chunks at 16 bits)
//! - `Marker`: id length `u16`, id bytes padded to even length, call count `u32`
//! - `ObjectAlloc`: object id `u16`, virtual address `u64`, size `u64` (9 chunks)
//! - `ObjectFree`: object id `u16` (1 chunk)

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::codec::{crc_packet, ChannelConfig, Packet};
use crate::error::{Error, Result};

pub const MSG_MARKER: u32 = 1;
pub const MSG_MAILBOX_INFO: u32 = 2;
pub const MSG_OBJECT_ALLOC: u32 = 3;
pub const MSG_OBJECT_FREE: u32 = 4;

pub const MAX_MARKER_ID_BYTES: usize = 8;

/// Data messages in the preamble (100 data packets).
pub const PREAMBLE_MESSAGES: usize = 50;
/// Seed of the preamble generator ("MEMCTXPR").
pub const PREAMBLE_SEED: u64 = 0x4D45_4D43_5458_5052;

/// Program event carried over the channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    MailboxInfo {
        #[serde(with = "crate::serde_hex")]
        virtual_base: u64,
        pid: u32,
    },
    Marker {
        id: String,
        call_count: u32,
    },
    ObjectAlloc {
        object_id: u16,
        #[serde(with = "crate::serde_hex")]
        virtual_addr: u64,
        size_bytes: u64,
    },
    ObjectFree {
        object_id: u16,
    },
}

impl Event {
    pub fn msg_type(&self) -> u32 {
        match self {
            Event::Marker { .. } => MSG_MARKER,
            Event::MailboxInfo { .. } => MSG_MAILBOX_INFO,
            Event::ObjectAlloc { .. } => MSG_OBJECT_ALLOC,
            Event::ObjectFree { .. } => MSG_OBJECT_FREE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Event::Marker { id, .. } if id.is_empty() => {
                Err(Error::InvalidEvent("marker id must be non-empty".into()))
            }
            Event::Marker { id, .. } if id.len() > MAX_MARKER_ID_BYTES => Err(Error::PayloadTooLarge(
                format!("marker id {id:?} is {} bytes, limit {MAX_MARKER_ID_BYTES}", id.len()),
            )),
            Event::ObjectAlloc { size_bytes: 0, .. } => {
                Err(Error::InvalidEvent("object size must be > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Big-endian byte layout carried by the event's chunks.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        match self {
            Event::MailboxInfo { virtual_base, pid } => {
                out.extend_from_slice(&virtual_base.to_be_bytes());
                out.extend_from_slice(&pid.to_be_bytes());
            }
            Event::Marker { id, call_count } => {
                out.extend_from_slice(&(id.len() as u16).to_be_bytes());
                out.extend_from_slice(id.as_bytes());
                if id.len() % 2 == 1 {
                    out.push(0);
                }
                out.extend_from_slice(&call_count.to_be_bytes());
            }
            Event::ObjectAlloc {
                object_id,
                virtual_addr,
                size_bytes,
            } => {
                out.extend_from_slice(&object_id.to_be_bytes());
                out.extend_from_slice(&virtual_addr.to_be_bytes());
                out.extend_from_slice(&size_bytes.to_be_bytes());
            }
            Event::ObjectFree { object_id } => out.extend_from_slice(&object_id.to_be_bytes()),
        }
        Ok(out)
    }

    /// Parses the byte layout for `msg_type`. Trailing chunk padding is ignored.
    pub fn from_bytes(msg_type: u32, bytes: &[u8]) -> Result<Event> {
        let need = layout_len(msg_type, bytes)?
            .ok_or_else(|| Error::InvalidEvent("truncated event".into()))?;
        if bytes.len() < need {
            return Err(Error::InvalidEvent(format!(
                "type {msg_type}: have {} bytes, need {need}",
                bytes.len()
            )));
        }
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
        let u64_at = |i: usize| u64::from_be_bytes(bytes[i..i + 8].try_into().unwrap());
        let event = match msg_type {
            MSG_MAILBOX_INFO => Event::MailboxInfo {
                virtual_base: u64_at(0),
                pid: u32_at(8),
            },
            MSG_MARKER => {
                let len = u16_at(0) as usize;
                let text = &bytes[2..2 + len];
                if len % 2 == 1 && bytes[2 + len] != 0 {
                    return Err(Error::InvalidEvent("nonzero marker padding".into()));
                }
                let id = std::str::from_utf8(text)
                    .map_err(|_| Error::InvalidEvent("marker id is not UTF-8".into()))?
                    .to_string();
                Event::Marker {
                    id,
                    call_count: u32_at(2 + len.next_multiple_of(2)),
                }
            }
            MSG_OBJECT_ALLOC => Event::ObjectAlloc {
                object_id: u16_at(0),
                virtual_addr: u64_at(2),
                size_bytes: u64_at(10),
            },
            MSG_OBJECT_FREE => Event::ObjectFree {
                object_id: u16_at(0),
            },
            other => return Err(Error::InvalidEvent(format!("unknown message type {other}"))),
        };
        event.validate().map_err(|e| Error::InvalidEvent(e.to_string()))?;
        Ok(event)
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::MailboxInfo { virtual_base, pid } => {
                write!(f, "mailbox-info vbase={virtual_base:#x} pid={pid}")
            }
            Event::Marker { id, call_count } => write!(f, "marker {id}:{call_count}"),
            Event::ObjectAlloc {
                object_id,
                virtual_addr,
                size_bytes,
            } => write!(f, "alloc #{object_id} {virtual_addr:#x}+{size_bytes}"),
            Event::ObjectFree { object_id } => write!(f, "free #{object_id}"),
        }
    }
}

pub fn is_known_type(msg_type: u32) -> bool {
    (MSG_MARKER..=MSG_OBJECT_FREE).contains(&msg_type)
}

/// Byte length of a layout, or `None` when the prefix is too short to tell.
fn layout_len(msg_type: u32, prefix: &[u8]) -> Result<Option<usize>> {
    Ok(Some(match msg_type {
        MSG_MAILBOX_INFO => 12,
        MSG_OBJECT_ALLOC => 18,
        MSG_OBJECT_FREE => 2,
        MSG_MARKER => {
            if prefix.len() < 2 {
                return Ok(None);
            }
            let len = u16::from_be_bytes([prefix[0], prefix[1]]) as usize;
            if len == 0 || len > MAX_MARKER_ID_BYTES {
                return Err(Error::InvalidEvent(format!("marker id length {len}")));
            }
            2 + len.next_multiple_of(2) + 4
        }
        other => return Err(Error::InvalidEvent(format!("unknown message type {other}"))),
    }))
}

/// Field widths of a chunk at one packet width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkLayout {
    pub type_bits: u32,
    pub seq_bits: u32,
    pub payload_bytes: usize,
}

impl ChunkLayout {
    pub fn for_config(cfg: &ChannelConfig) -> Self {
        let bits = cfg.packet_bits();
        let (type_bits, seq_bits) = if bits == 8 { (3, 5) } else { (bits / 2, bits / 2) };
        ChunkLayout {
            type_bits,
            seq_bits,
            payload_bytes: cfg.packet_bytes(),
        }
    }

    pub fn max_chunks(&self) -> usize {
        1 << self.seq_bits
    }

    /// Number of chunks needed for a byte layout of `len` bytes.
    pub fn chunks_for(&self, len: usize) -> usize {
        len.div_ceil(self.payload_bytes)
    }

    /// Largest chunk count any event of `msg_type` can need.
    pub fn type_chunk_limit(&self, msg_type: u32) -> usize {
        let len = match msg_type {
            MSG_MAILBOX_INFO => 12,
            MSG_OBJECT_ALLOC => 18,
            MSG_OBJECT_FREE => 2,
            MSG_MARKER => 2 + MAX_MARKER_ID_BYTES + 4,
            _ => return 0,
        };
        self.chunks_for(len)
    }
}

/// One message's worth of an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Chunk {
    pub msg_type: u32,
    pub seq: u32,
    pub payload: u32,
}

impl Chunk {
    pub fn from_pair(a: Packet, b: Packet, cfg: &ChannelConfig) -> Chunk {
        let layout = ChunkLayout::for_config(cfg);
        Chunk {
            msg_type: a.0 >> layout.seq_bits,
            seq: a.0 & ((1 << layout.seq_bits) - 1),
            payload: b.0,
        }
    }

    pub fn to_pair(&self, cfg: &ChannelConfig) -> (Packet, Packet) {
        let layout = ChunkLayout::for_config(cfg);
        (Packet((self.msg_type << layout.seq_bits) | self.seq), Packet(self.payload))
    }
}

/// Two data packets and their checksum, in transmit order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Message {
    pub a: Packet,
    pub b: Packet,
    pub crc: Packet,
}

impl Message {
    pub fn new(a: Packet, b: Packet, cfg: &ChannelConfig) -> Message {
        Message {
            a,
            b,
            crc: crc_packet(&[a, b], cfg),
        }
    }

    pub fn packets(&self) -> [Packet; 3] {
        [self.a, self.b, self.crc]
    }
}

pub fn event_chunks(e: &Event, cfg: &ChannelConfig) -> Result<Vec<Chunk>> {
    let layout = ChunkLayout::for_config(cfg);
    let bytes = e.to_bytes()?;
    let n = layout.chunks_for(bytes.len());
    if n > layout.max_chunks() {
        return Err(Error::PayloadTooLarge(format!(
            "{n} chunks exceed {} at {}-bit packets",
            layout.max_chunks(),
            cfg.packet_bits()
        )));
    }
    Ok(bytes
        .chunks(layout.payload_bytes)
        .enumerate()
        .map(|(seq, part)| {
            let mut payload = 0u32;
            for i in 0..layout.payload_bytes {
                payload = (payload << 8) | u32::from(part.get(i).copied().unwrap_or(0));
            }
            Chunk {
                msg_type: e.msg_type(),
                seq: seq as u32,
                payload,
            }
        })
        .collect())
}

pub fn serialize_event(e: &Event, cfg: &ChannelConfig) -> Result<Vec<Message>> {
    Ok(event_chunks(e, cfg)?
        .iter()
        .map(|c| {
            let (a, b) = c.to_pair(cfg);
            Message::new(a, b, cfg)
        })
        .collect())
}

/// Outcome of reassembling one event from its chunks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assembly {
    Complete(Event),
    Incomplete {
        present: usize,
        needed: Option<usize>,
    },
}

/// Reassembles an event from chunk payloads keyed by sequence number.
pub fn assemble_chunks(
    msg_type: u32,
    chunks: &BTreeMap<u32, u32>,
    cfg: &ChannelConfig,
) -> Result<Assembly> {
    let layout = ChunkLayout::for_config(cfg);
    let mut prefix = Vec::new();
    for (expect, (&seq, &payload)) in chunks.iter().enumerate() {
        if seq as usize != expect {
            break;
        }
        prefix.extend_from_slice(&payload.to_be_bytes()[4 - layout.payload_bytes..]);
    }
    let needed = layout_len(msg_type, &prefix)?.map(|len| layout.chunks_for(len));
    match needed {
        Some(n) if prefix.len() >= n * layout.payload_bytes => {
            if chunks.keys().any(|&s| s as usize >= n) {
                return Err(Error::InvalidEvent(format!(
                    "type {msg_type}: sequence beyond {n} chunks"
                )));
            }
            Event::from_bytes(msg_type, &prefix).map(Assembly::Complete)
        }
        _ => Ok(Assembly::Incomplete {
            present: chunks.len(),
            needed,
        }),
    }
}

/// Reassembles one event from CRC-validated `(A, B)` pairs given in arrival
/// order. Duplicates collapse; a second payload for the same sequence number
/// is an ambiguity.
pub fn deserialize_event(pairs: &[(Packet, Packet)], cfg: &ChannelConfig) -> Result<Assembly> {
    let mut msg_type = None;
    let mut chunks = BTreeMap::new();
    for &(a, b) in pairs {
        let c = Chunk::from_pair(a, b, cfg);
        if !is_known_type(c.msg_type) {
            return Err(Error::InvalidEvent(format!("unknown message type {}", c.msg_type)));
        }
        match msg_type {
            None => msg_type = Some(c.msg_type),
            Some(t) if t != c.msg_type => {
                return Err(Error::InvalidEvent(format!(
                    "mixed message types {t} and {}",
                    c.msg_type
                )))
            }
            _ => {}
        }
        match chunks.insert(c.seq, c.payload) {
            Some(prev) if prev != c.payload => {
                return Err(Error::Ambiguous {
                    msg_type: c.msg_type,
                    seq: c.seq,
                    first: prev,
                    second: c.payload,
                })
            }
            _ => {}
        }
    }
    match msg_type {
        Some(t) => assemble_chunks(t, &chunks, cfg),
        None => Ok(Assembly::Incomplete {
            present: 0,
            needed: None,
        }),
    }
}

struct PreambleSet {
    messages: Vec<Message>,
    index: HashMap<(u32, u32), usize>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn build_preamble(bits: u32) -> PreambleSet {
    let cfg = ChannelConfig::new(bits).expect("supported width");
    let layout = ChunkLayout::for_config(&cfg);
    let mask = cfg.packet_mask();
    let mut state = PREAMBLE_SEED ^ u64::from(bits);
    let mut messages = Vec::with_capacity(PREAMBLE_MESSAGES);
    let mut index = HashMap::new();
    while messages.len() < PREAMBLE_MESSAGES {
        let a = (splitmix64(&mut state) & mask) as u32;
        let b = (splitmix64(&mut state) & mask) as u32;
        // Keep preamble A packets out of the typed-chunk tag space.
        if is_known_type(a >> layout.seq_bits) || index.contains_key(&(a, b)) {
            continue;
        }
        index.insert((a, b), messages.len());
        messages.push(Message::new(Packet(a), Packet(b), &cfg));
    }
    PreambleSet { messages, index }
}

fn preamble_set(cfg: &ChannelConfig) -> &'static PreambleSet {
    static SETS: [OnceLock<PreambleSet>; 4] = [
        OnceLock::new(),
        OnceLock::new(),
        OnceLock::new(),
        OnceLock::new(),
    ];
    let bits = cfg.packet_bits();
    SETS[(bits / 8 - 1) as usize].get_or_init(|| build_preamble(bits))
}

/// The fixed preamble for the config's packet width.
pub fn preamble_sequence(cfg: &ChannelConfig) -> Vec<Message> {
    preamble_set(cfg).messages.clone()
}

/// Position of `(a, b)` in the preamble, if it is a preamble pair.
pub fn preamble_index(a: Packet, b: Packet, cfg: &ChannelConfig) -> Option<usize> {
    preamble_set(cfg).index.get(&(a.0, b.0)).copied()
}

pub fn is_preamble_message(a: Packet, b: Packet, cfg: &ChannelConfig) -> bool {
    preamble_index(a, b, cfg).is_some()
}
