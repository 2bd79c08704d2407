//! Address-level primitives shared by the encoder and decoder.
//!
//! A packet is carried in the bits of a read address just above the 64-byte
//! line offset. A mailbox window is the naturally aligned range spanned by all
//! packet values, so its size is `2^(packet_bits + 6)` bytes:
//!
//! ```text
//!  63                 packet_bits+6                6       0
//! +-----------------------+------------------------+-------+
//! |  window (base >> n)   |  packet (scrambled)    | 00000 |
//! +-----------------------+------------------------+-------+
//! ```

pub mod crc;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bits of cache-line offset below the packet field.
pub const OFFSET_BITS: u32 = 6;
/// Cache line size in bytes.
pub const LINE_BYTES: u64 = 1 << OFFSET_BITS;
/// Packet widths with a matching standard CRC.
pub const SUPPORTED_WIDTHS: [u32; 4] = [8, 16, 24, 32];

/// Default randomizer multipliers. Each is odd, and maps packets 1, 2, 3 to
/// addresses more than one 4 KiB page apart from each other.
pub const fn default_randomizer_key(bits: u32) -> u32 {
    match bits {
        8 => 0xB5,
        16 => 0x9E37,
        24 => 0x9E_3779,
        _ => 0x9E37_79B9,
    }
}

/// Size in bytes of the mailbox window for a packet width.
pub fn window_size(packet_bits: u32) -> Result<u64> {
    if SUPPORTED_WIDTHS.contains(&packet_bits) {
        Ok(1u64 << (packet_bits + OFFSET_BITS))
    } else {
        Err(Error::InvalidConfig(format!(
            "unsupported packet width {packet_bits}, expected one of 8/16/24/32"
        )))
    }
}

/// Modular inverse of an odd multiplier modulo 2^64, by Newton iteration.
fn inverse_odd(k: u64) -> u64 {
    let mut inv = k;
    for _ in 0..6 {
        inv = inv.wrapping_mul(2u64.wrapping_sub(k.wrapping_mul(inv)));
    }
    inv
}

/// One row of the address format table: packet width plus randomizer setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "ConfigRepr", into = "ConfigRepr")]
pub struct ChannelConfig {
    packet_bits: u32,
    randomizer_key: Option<u32>,
    inverse_key: u32,
}

#[derive(Serialize, Deserialize)]
struct ConfigRepr {
    packet_bits: u32,
    randomizer_enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    randomizer_key: Option<u32>,
}

impl TryFrom<ConfigRepr> for ChannelConfig {
    type Error = Error;

    fn try_from(r: ConfigRepr) -> Result<Self> {
        let cfg = ChannelConfig::new(r.packet_bits)?;
        match (r.randomizer_enabled, r.randomizer_key) {
            (false, _) => Ok(cfg),
            (true, None) => Ok(cfg.with_randomizer()),
            (true, Some(k)) => cfg.with_randomizer_key(k),
        }
    }
}

impl From<ChannelConfig> for ConfigRepr {
    fn from(c: ChannelConfig) -> Self {
        ConfigRepr {
            packet_bits: c.packet_bits,
            randomizer_enabled: c.randomizer_key.is_some(),
            randomizer_key: c.randomizer_key,
        }
    }
}

impl ChannelConfig {
    pub fn new(packet_bits: u32) -> Result<Self> {
        window_size(packet_bits)?;
        Ok(Self {
            packet_bits,
            randomizer_key: None,
            inverse_key: 1,
        })
    }

    /// Enables the randomizer with the width's default key.
    pub fn with_randomizer(self) -> Self {
        self.with_randomizer_key(default_randomizer_key(self.packet_bits))
            .expect("default keys are valid")
    }

    pub fn with_randomizer_key(self, key: u32) -> Result<Self> {
        if key & 1 == 0 {
            return Err(Error::InvalidConfig(format!(
                "randomizer key {key:#x} must be odd"
            )));
        }
        if u64::from(key) > self.packet_mask() {
            return Err(Error::InvalidConfig(format!(
                "randomizer key {key:#x} exceeds {} bits",
                self.packet_bits
            )));
        }
        let inverse = (inverse_odd(u64::from(key)) & self.packet_mask()) as u32;
        Ok(Self {
            randomizer_key: Some(key),
            inverse_key: inverse,
            ..self
        })
    }

    /// The eight configurations a decoder searches by default.
    pub fn all_candidates() -> Vec<ChannelConfig> {
        SUPPORTED_WIDTHS
            .iter()
            .flat_map(|&bits| {
                let cfg = ChannelConfig::new(bits).expect("supported width");
                [cfg, cfg.with_randomizer()]
            })
            .collect()
    }

    pub fn packet_bits(&self) -> u32 {
        self.packet_bits
    }

    pub fn crc_bits(&self) -> u32 {
        self.packet_bits
    }

    pub fn offset_bits(&self) -> u32 {
        OFFSET_BITS
    }

    pub fn packet_bytes(&self) -> usize {
        (self.packet_bits / 8) as usize
    }

    pub fn randomizer_enabled(&self) -> bool {
        self.randomizer_key.is_some()
    }

    pub fn randomizer_key(&self) -> Option<u32> {
        self.randomizer_key
    }

    pub fn packet_mask(&self) -> u64 {
        (1u64 << self.packet_bits) - 1
    }

    /// log2 of the window size.
    pub fn window_shift(&self) -> u32 {
        self.packet_bits + OFFSET_BITS
    }

    pub fn window_bytes(&self) -> u64 {
        1u64 << self.window_shift()
    }

    /// Base of the naturally aligned window that contains `addr`.
    pub fn window_base_of(&self, addr: u64) -> u64 {
        addr & !(self.window_bytes() - 1)
    }

    pub fn packet(&self, value: u64) -> Result<Packet> {
        if value > self.packet_mask() {
            return Err(Error::InvalidConfig(format!(
                "packet value {value:#x} exceeds {} bits",
                self.packet_bits
            )));
        }
        Ok(Packet(value as u32))
    }
}

impl fmt::Display for ChannelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-bit", self.packet_bits)?;
        if let Some(k) = self.randomizer_key {
            write!(f, "+rand({k:#x})")?;
        }
        Ok(())
    }
}

/// Payload bits carried by one read address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Packet(pub u32);

impl Packet {
    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::LowerHex for Packet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::LowerHex::fmt(&self.0, f)
    }
}

/// Physical byte address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhysAddr(pub u64);

impl PhysAddr {
    pub fn value(self) -> u64 {
        self.0
    }

    pub fn line(self) -> u64 {
        self.0 >> OFFSET_BITS
    }
}

impl fmt::Display for PhysAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

pub fn scramble(p: Packet, cfg: &ChannelConfig) -> Packet {
    match cfg.randomizer_key {
        Some(k) => Packet(((u64::from(p.0) * u64::from(k)) & cfg.packet_mask()) as u32),
        None => p,
    }
}

pub fn unscramble(p: Packet, cfg: &ChannelConfig) -> Packet {
    match cfg.randomizer_key {
        Some(_) => Packet(((u64::from(p.0) * u64::from(cfg.inverse_key)) & cfg.packet_mask()) as u32),
        None => p,
    }
}

fn check_base(base: PhysAddr, cfg: &ChannelConfig) -> Result<()> {
    if base.0 & (cfg.window_bytes() - 1) != 0 {
        return Err(Error::Misaligned {
            addr: base.0,
            align: cfg.window_bytes(),
        });
    }
    Ok(())
}

/// Read address that carries `p` in the mailbox at `base`.
pub fn assemble_address(base: PhysAddr, p: Packet, cfg: &ChannelConfig) -> Result<PhysAddr> {
    check_base(base, cfg)?;
    if u64::from(p.0) > cfg.packet_mask() {
        return Err(Error::InvalidConfig(format!(
            "packet {:#x} exceeds {} bits",
            p.0, cfg.packet_bits
        )));
    }
    let s = scramble(p, cfg);
    Ok(PhysAddr(base.0 + (u64::from(s.0) << OFFSET_BITS)))
}

/// Inverse of [`assemble_address`].
pub fn extract_packet(addr: PhysAddr, base: PhysAddr, cfg: &ChannelConfig) -> Result<Packet> {
    check_base(base, cfg)?;
    if addr.0 < base.0 || addr.0 - base.0 >= cfg.window_bytes() {
        return Err(Error::NotInMailbox {
            addr: addr.0,
            base: base.0,
        });
    }
    if addr.0 & (LINE_BYTES - 1) != 0 {
        return Err(Error::Misaligned {
            addr: addr.0,
            align: LINE_BYTES,
        });
    }
    let raw = Packet(((addr.0 - base.0) >> OFFSET_BITS) as u32);
    Ok(unscramble(raw, cfg))
}

/// Checksum packet over data packets, each serialized big-endian at the
/// packet width and concatenated in transmit order.
pub fn crc_packet(data: &[Packet], cfg: &ChannelConfig) -> Packet {
    let n = cfg.packet_bytes();
    let mut buf = Vec::with_capacity(data.len() * n);
    for p in data {
        buf.extend_from_slice(&p.0.to_be_bytes()[4 - n..]);
    }
    Packet(crc::for_width(cfg.crc_bits()).checksum(&buf))
}
