//! Sliding packet window and the permutation-CRC triple check.

use crate::codec::crc::PairCrc;
use crate::codec::{ChannelConfig, Packet};

/// Packets held by one window.
pub const WINDOW_PACKETS: usize = 8;

/// Ordered triples that include the newest packet of a full window.
pub const TRIPLES_PER_PUSH: usize = 3 * (WINDOW_PACKETS - 1) * (WINDOW_PACKETS - 2);

/// A CRC-consistent `(A, B, CRC)` triple found in a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripleMatch {
    pub a: Packet,
    pub b: Packet,
    /// Earliest and latest trace index among the reads of the chosen triple
    /// (see [`PacketWindow::check_newest`]).
    pub first_index: usize,
    pub last_index: usize,
    pub first_ts: u64,
    pub last_ts: u64,
    /// Uses a packet already claimed by another pair, so likely a collision.
    pub reused: bool,
}

/// The last `WINDOW_PACKETS` packets seen in one mailbox candidate, with
/// their CRC terms cached at insertion.
#[derive(Clone)]
pub struct PacketWindow {
    crc: &'static PairCrc,
    vals: [u32; WINDOW_PACKETS],
    lead: [u32; WINDOW_PACKETS],
    trail: [u32; WINDOW_PACKETS],
    index: [usize; WINDOW_PACKETS],
    ts: [u64; WINDOW_PACKETS],
    owner: [u64; WINDOW_PACKETS],
    /// Claimed by the first validation of its pair, not by a repeat.
    strong: [bool; WINDOW_PACKETS],
    /// Taken over from another pair, so never part of a span.
    shared: [bool; WINDOW_PACKETS],
    head: usize,
    len: usize,
}

impl std::fmt::Debug for PacketWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.packets()).finish()
    }
}

impl PacketWindow {
    pub fn new(cfg: &ChannelConfig) -> Self {
        Self {
            crc: PairCrc::for_width(cfg.packet_bits()),
            vals: [0; WINDOW_PACKETS],
            lead: [0; WINDOW_PACKETS],
            trail: [0; WINDOW_PACKETS],
            index: [0; WINDOW_PACKETS],
            ts: [0; WINDOW_PACKETS],
            owner: [NO_OWNER; WINDOW_PACKETS],
            strong: [false; WINDOW_PACKETS],
            shared: [false; WINDOW_PACKETS],
            head: 0,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Packets oldest first.
    pub fn packets(&self) -> Vec<Packet> {
        self.slots().map(|s| Packet(self.vals[s])).collect()
    }

    fn slots(&self) -> impl Iterator<Item = usize> + '_ {
        let start = (self.head + WINDOW_PACKETS - self.len) % WINDOW_PACKETS;
        (0..self.len).map(move |i| (start + i) % WINDOW_PACKETS)
    }

    pub fn push(&mut self, p: Packet, index: usize, ts: u64) {
        let s = self.head;
        self.vals[s] = p.0;
        self.lead[s] = self.crc.lead(p.0);
        self.trail[s] = self.crc.trail(p.0);
        self.index[s] = index;
        self.ts[s] = ts;
        self.owner[s] = NO_OWNER;
        self.strong[s] = false;
        self.shared[s] = false;
        self.head = (s + 1) % WINDOW_PACKETS;
        self.len = (self.len + 1).min(WINDOW_PACKETS);
    }

    fn pair_key(a: u32, b: u32) -> u64 {
        (u64::from(a) << 32) | u64::from(b)
    }

    fn consider(&self, found: &mut Vec<Found>, x: usize, y: usize, z: usize) {
        let key = Self::pair_key(self.vals[x], self.vals[y]);
        let slots = [x, y, z];
        let foreign = slots.map(|s| self.owner[s] != NO_OWNER && self.owner[s] != key);
        let reused = (0..3).any(|i| foreign[i] && self.strong[slots[i]])
            || foreign.iter().filter(|&&f| f).count() >= 2;
        let first = (0..3)
            .filter(|&i| !foreign[i] && !self.shared[slots[i]])
            .map(|i| self.index[slots[i]])
            .min()
            .unwrap_or(usize::MAX);
        let f = Found {
            key,
            slots,
            own: [0, 1, 2].map(|i| !foreign[i] && !self.shared[slots[i]]),
            reused,
            first,
        };
        match found.iter_mut().find(|g| g.key == key) {
            Some(g) if (f.reused, f.first) < (g.reused, g.first) => *g = f,
            Some(_) => {}
            None => found.push(f),
        }
    }

    fn emit(&mut self, f: &Found, out: &mut Vec<TripleMatch>) {
        if !f.reused {
            let repeat = self.slots().any(|s| self.owner[s] == f.key);
            for &s in &f.slots {
                if self.owner[s] != f.key {
                    self.shared[s] |= self.owner[s] != NO_OWNER;
                    self.owner[s] = f.key;
                    self.strong[s] = !repeat;
                }
            }
        }
        // packets of other pairs stay out of the span
        let own: Vec<usize> = if f.own.contains(&true) {
            (0..3).filter(|&i| f.own[i]).map(|i| f.slots[i]).collect()
        } else {
            f.slots.to_vec()
        };
        out.push(TripleMatch {
            a: Packet(self.vals[f.slots[0]]),
            b: Packet(self.vals[f.slots[1]]),
            first_index: own.iter().map(|&s| self.index[s]).min().unwrap(),
            last_index: own.iter().map(|&s| self.index[s]).max().unwrap(),
            first_ts: own.iter().map(|&s| self.ts[s]).min().unwrap(),
            last_ts: own.iter().map(|&s| self.ts[s]).max().unwrap(),
            reused: f.reused,
        });
    }

    /// Appends every distinct `(A, B)` pair that forms a valid triple with
    /// the most recently pushed packet in any of the three roles.
    ///
    /// Each packet belongs to the pair it was first validated into. The
    /// encoder never shares a read between messages, so a triple using a
    /// packet of a different pair is flagged as `reused` and claims nothing.
    /// Packets taken by a repeat of a pair already in the window only hold
    /// a weak claim: a new pair may take over one of them, but not two.
    /// Among triples for one pair unflagged ones win, then the earliest.
    /// Packets of other pairs are left out of the reported span.
    pub fn check_newest(&mut self, out: &mut Vec<TripleMatch>) {
        if self.len < 3 {
            return;
        }
        let n = (self.head + WINDOW_PACKETS - 1) % WINDOW_PACKETS;
        let mut others = [0usize; WINDOW_PACKETS - 1];
        let mut k = 0;
        for s in self.slots() {
            if s != n {
                others[k] = s;
                k += 1;
            }
        }
        let others = &others[..k];
        let (vn, ln, tn) = (self.vals[n], self.lead[n], self.trail[n]);
        let mut found = Vec::new();
        for &y in others {
            let as_a = ln ^ self.trail[y];
            let as_b = self.lead[y] ^ tn;
            for &z in others {
                if z == y {
                    continue;
                }
                if as_a == self.vals[z] {
                    self.consider(&mut found, n, y, z);
                }
                if as_b == self.vals[z] {
                    self.consider(&mut found, y, n, z);
                }
                // (z, y, n): z is A, y is B, newest is the checksum
                if self.lead[z] ^ self.trail[y] == vn {
                    self.consider(&mut found, z, y, n);
                }
            }
        }
        for f in &found {
            self.emit(f, out);
        }
    }
}

const NO_OWNER: u64 = u64::MAX;

struct Found {
    key: u64,
    /// Window slots of A, B and the checksum.
    slots: [usize; 3],
    /// Slots not claimed by another pair.
    own: [bool; 3],
    reused: bool,
    first: usize,
}

/// All distinct `(A, B)` pairs in the window that have their checksum at a
/// third position, in any arrival order.
pub fn triple_check(window: &PacketWindow, cfg: &ChannelConfig) -> Vec<(Packet, Packet)> {
    let pc = PairCrc::for_width(cfg.packet_bits());
    let p = window.packets();
    let mut out = Vec::new();
    for (i, a) in p.iter().enumerate() {
        for (j, b) in p.iter().enumerate() {
            for (k, c) in p.iter().enumerate() {
                if i == j || j == k || i == k {
                    continue;
                }
                if pc.pair(a.0, b.0) == c.0 && !out.contains(&(*a, *b)) {
                    out.push((*a, *b));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::crc_packet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(bits: u32) -> ChannelConfig {
        ChannelConfig::new(bits).unwrap()
    }

    #[test]
    fn all_six_orders_validate() {
        let c = cfg(16);
        let (a, b) = (Packet(0x0100), Packet(0x0000));
        let k = crc_packet(&[a, b], &c);
        let orders = [
            [a, b, k],
            [a, k, b],
            [b, a, k],
            [b, k, a],
            [k, a, b],
            [k, b, a],
        ];
        for order in orders {
            let mut w = PacketWindow::new(&c);
            let mut hits = Vec::new();
            for (i, p) in order.iter().enumerate() {
                w.push(*p, i, i as u64);
                w.check_newest(&mut hits);
            }
            assert!(hits.iter().any(|m| m.a == a && m.b == b), "{order:?}");
            assert!(triple_check(&w, &c).contains(&(a, b)));
        }
    }

    #[test]
    fn incremental_matches_exhaustive() {
        // Over a stream, the union of newest-packet checks equals the
        // exhaustive check of every window state.
        let c = cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = PacketWindow::new(&c);
        let mut reused = 0;
        for i in 0..20_000 {
            w.push(Packet(rng.random_range(0..256)), i, 0);
            let mut inc = Vec::new();
            w.check_newest(&mut inc);
            reused += inc.iter().filter(|m| m.reused).count();
            let newest = *w.packets().last().unwrap();
            let full = triple_check(&w, &c);
            // pairs whose triple needs the newest packet
            let mut prev = w.packets();
            prev.pop();
            let mut older = PacketWindow::new(&c);
            for p in &prev {
                older.push(*p, 0, 0);
            }
            let before = triple_check(&older, &c);
            for pair in &full {
                if !before.contains(pair) {
                    assert!(inc.iter().any(|m| (m.a, m.b) == *pair), "missed {pair:?} newest {newest:?}");
                }
            }
            for m in &inc {
                assert!(full.contains(&(m.a, m.b)));
            }
        }
        assert!(reused > 0);
    }

    #[test]
    fn claimed_checksum_flags_collision() {
        let c = cfg(16);
        let pc = PairCrc::for_width(16);
        let (a, b) = (Packet(0x0203), Packet(0x1111));
        let k = crc_packet(&[a, b], &c);
        let b2 = Packet(0x2222);
        // the A packet that makes (a2, b2) collide onto k
        let a2 = Packet((0..=0xFFFF).find(|&x| pc.pair(x, b2.0) == k.0).unwrap());
        let mut w = PacketWindow::new(&c);
        let mut hits = Vec::new();
        for (i, p) in [a, b, k, b2, a2].iter().enumerate() {
            w.push(*p, i, 0);
            w.check_newest(&mut hits);
        }
        let got: Vec<_> = hits.iter().map(|m| (m.a, m.b, m.reused)).collect();
        assert_eq!(got, vec![(a, b, false), (a2, b2, true)]);
    }

    #[test]
    fn repeat_does_not_block_next_pair() {
        // Two consecutive pairs share their B packet; the repeat of the first
        // pair through the second B must not hide the second pair.
        let c = cfg(16);
        let (a3, a4, b) = (Packet(0x0203), Packet(0x0204), Packet(0));
        let k3 = crc_packet(&[a3, b], &c);
        let k4 = crc_packet(&[a4, b], &c);
        let mut w = PacketWindow::new(&c);
        let mut hits = Vec::new();
        for (i, p) in [a3, b, k3, a4, b, k4].iter().enumerate() {
            w.push(*p, i, 0);
            w.check_newest(&mut hits);
        }
        let pairs: Vec<_> = hits.iter().map(|m| (m.a, m.b, m.reused)).collect();
        assert!(pairs.contains(&(a3, b, false)) && pairs.contains(&(a4, b, false)), "{pairs:?}");
    }

    #[test]
    fn span_reports_extreme_indices() {
        let c = cfg(32);
        let (a, b) = (Packet(0x0001_0000), Packet(0xDEAD_BEEF));
        let k = crc_packet(&[a, b], &c);
        let mut w = PacketWindow::new(&c);
        let mut hits = Vec::new();
        for (i, p) in [k, Packet(7), a, Packet(9), b].iter().enumerate() {
            w.push(*p, 100 + i, 1000 + 10 * i as u64);
            w.check_newest(&mut hits);
        }
        assert_eq!(hits.len(), 1);
        assert_eq!((hits[0].first_index, hits[0].last_index), (100, 104));
        assert_eq!((hits[0].first_ts, hits[0].last_ts), (1000, 1040));
    }

    #[test]
    fn window_forgets_old_packets() {
        let c = cfg(16);
        let (a, b) = (Packet(0x0200), Packet(0x1234));
        let k = crc_packet(&[a, b], &c);
        let mut w = PacketWindow::new(&c);
        w.push(a, 0, 0);
        w.push(b, 1, 0);
        for i in 0..WINDOW_PACKETS - 2 {
            w.push(Packet(0xF000 + i as u32), 2 + i, 0);
        }
        w.push(k, 99, 0);
        let mut hits = Vec::new();
        w.check_newest(&mut hits);
        assert!(hits.is_empty());
        assert_eq!(w.len(), WINDOW_PACKETS);
    }

    #[test]
    fn triple_count_constant() {
        assert_eq!(TRIPLES_PER_PUSH, 126);
    }
}
