//! Table-driven CRCs at the four supported packet widths.
//!
//! | width | algorithm        | poly       | init       | reflected | xorout     | check      |
//! |-------|------------------|------------|------------|-----------|------------|------------|
//! | 8     | CRC-8/SMBUS      | 0x07       | 0x00       | no        | 0x00       | 0xF4       |
//! | 16    | CRC-16/IBM-3740  | 0x1021     | 0xFFFF     | no        | 0x0000     | 0x29B1     |
//! | 24    | CRC-24/OPENPGP   | 0x864CFB   | 0xB704CE   | no        | 0x000000   | 0x21CF02   |
//! | 32    | CRC-32/ISO-HDLC  | 0x04C11DB7 | 0xFFFFFFFF | yes       | 0xFFFFFFFF | 0xCBF43926 |
//!
//! CRC-16/IBM-3740 is the algorithm commonly called CRC-16/CCITT-FALSE.

use std::sync::OnceLock;

/// Parameters of one CRC algorithm in the Rocksoft model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrcAlgorithm {
    pub width: u32,
    pub poly: u32,
    pub init: u32,
    pub reflected: bool,
    pub xorout: u32,
    pub check: u32,
}

pub const CRC8_SMBUS: CrcAlgorithm = CrcAlgorithm {
    width: 8,
    poly: 0x07,
    init: 0x00,
    reflected: false,
    xorout: 0x00,
    check: 0xF4,
};

pub const CRC16_CCITT_FALSE: CrcAlgorithm = CrcAlgorithm {
    width: 16,
    poly: 0x1021,
    init: 0xFFFF,
    reflected: false,
    xorout: 0x0000,
    check: 0x29B1,
};

pub const CRC24_OPENPGP: CrcAlgorithm = CrcAlgorithm {
    width: 24,
    poly: 0x86_4CFB,
    init: 0xB7_04CE,
    reflected: false,
    xorout: 0,
    check: 0x21_CF02,
};

pub const CRC32_ISO_HDLC: CrcAlgorithm = CrcAlgorithm {
    width: 32,
    poly: 0x04C1_1DB7,
    init: 0xFFFF_FFFF,
    reflected: true,
    xorout: 0xFFFF_FFFF,
    check: 0xCBF4_3926,
};

const fn width_mask(width: u32) -> u32 {
    if width >= 32 {
        u32::MAX
    } else {
        (1u32 << width) - 1
    }
}

const fn reflect(mut v: u32, bits: u32) -> u32 {
    let mut out = 0u32;
    let mut i = 0;
    while i < bits {
        out = (out << 1) | (v & 1);
        v >>= 1;
        i += 1;
    }
    out
}

const fn build_table(alg: CrcAlgorithm) -> [u32; 256] {
    let mut table = [0u32; 256];
    let mask = width_mask(alg.width);
    let mut b = 0usize;
    if alg.reflected {
        let poly = reflect(alg.poly, alg.width);
        while b < 256 {
            let mut crc = b as u32;
            let mut i = 0;
            while i < 8 {
                crc = if crc & 1 != 0 { (crc >> 1) ^ poly } else { crc >> 1 };
                i += 1;
            }
            table[b] = crc & mask;
            b += 1;
        }
    } else {
        let top = 1u32 << (alg.width - 1);
        while b < 256 {
            let mut crc = (b as u32) << (alg.width - 8);
            let mut i = 0;
            while i < 8 {
                crc = if crc & top != 0 { (crc << 1) ^ alg.poly } else { crc << 1 };
                i += 1;
            }
            table[b] = crc & mask;
            b += 1;
        }
    }
    table
}

/// A CRC engine with a precomputed byte table.
#[derive(Debug)]
pub struct Crc {
    alg: CrcAlgorithm,
    table: [u32; 256],
}

impl Crc {
    pub const fn new(alg: CrcAlgorithm) -> Self {
        Self {
            alg,
            table: build_table(alg),
        }
    }

    pub fn algorithm(&self) -> &CrcAlgorithm {
        &self.alg
    }

    pub fn checksum(&self, bytes: &[u8]) -> u32 {
        let alg = &self.alg;
        let mask = width_mask(alg.width);
        let mut crc = if alg.reflected {
            reflect(alg.init, alg.width)
        } else {
            alg.init
        };
        if alg.reflected {
            for &b in bytes {
                crc = (crc >> 8) ^ self.table[((crc ^ b as u32) & 0xFF) as usize];
            }
        } else {
            let shift = alg.width - 8;
            for &b in bytes {
                let idx = ((crc >> shift) ^ b as u32) & 0xFF;
                crc = ((crc << 8) ^ self.table[idx as usize]) & mask;
            }
        }
        (crc ^ alg.xorout) & mask
    }
}

pub static CRC8: Crc = Crc::new(CRC8_SMBUS);
pub static CRC16: Crc = Crc::new(CRC16_CCITT_FALSE);
pub static CRC24: Crc = Crc::new(CRC24_OPENPGP);
pub static CRC32: Crc = Crc::new(CRC32_ISO_HDLC);

/// Engine for a packet width in bits.
pub fn for_width(bits: u32) -> &'static Crc {
    match bits {
        8 => &CRC8,
        16 => &CRC16,
        24 => &CRC24,
        32 => &CRC32,
        _ => panic!("unsupported CRC width {bits}"),
    }
}

/// Two-packet CRC split into independent per-position terms.
///
/// A CRC over a fixed-length input is affine over GF(2), so for a message
/// `x || y` it factors as `lead(x) ^ trail(y)`. Each term is a handful of
/// table lookups, which lets the decoder test every ordered pair in a
/// window with one XOR per pair.
#[derive(Debug, Clone)]
pub struct PairCrc {
    packet_bytes: usize,
    /// `lin[k][v]`: linear contribution of byte value `v` at byte position `k`.
    lin: Vec<[u32; 256]>,
    zero: u32,
}

impl PairCrc {
    pub fn new(bits: u32) -> Self {
        let crc = for_width(bits);
        let packet_bytes = (bits / 8) as usize;
        let len = packet_bytes * 2;
        let zeros = vec![0u8; len];
        let zero = crc.checksum(&zeros);
        let mut lin = vec![[0u32; 256]; len];
        let mut buf = zeros.clone();
        for (k, row) in lin.iter_mut().enumerate() {
            for (v, cell) in row.iter_mut().enumerate() {
                buf[k] = v as u8;
                *cell = crc.checksum(&buf) ^ zero;
            }
            buf[k] = 0;
        }
        Self {
            packet_bytes,
            lin,
            zero,
        }
    }

    #[inline]
    fn fold(&self, offset: usize, value: u32) -> u32 {
        let mut acc = 0;
        for i in 0..self.packet_bytes {
            let byte = (value >> (8 * (self.packet_bytes - 1 - i))) & 0xFF;
            acc ^= self.lin[offset + i][byte as usize];
        }
        acc
    }

    /// Term for a packet in the first (A) position, including the affine constant.
    #[inline]
    pub fn lead(&self, value: u32) -> u32 {
        self.zero ^ self.fold(0, value)
    }

    /// Term for a packet in the second (B) position.
    #[inline]
    pub fn trail(&self, value: u32) -> u32 {
        self.fold(self.packet_bytes, value)
    }

    #[inline]
    pub fn pair(&self, a: u32, b: u32) -> u32 {
        self.lead(a) ^ self.trail(b)
    }

    /// Shared instance for a packet width.
    pub fn for_width(bits: u32) -> &'static PairCrc {
        static CACHE: [OnceLock<PairCrc>; 4] = [
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
            OnceLock::new(),
        ];
        assert!(matches!(bits, 8 | 16 | 24 | 32), "unsupported CRC width {bits}");
        CACHE[(bits / 8 - 1) as usize].get_or_init(|| PairCrc::new(bits))
    }
}
