//! Unrelated program traffic that surrounds the metadata reads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Clock;
use crate::codec::{PhysAddr, LINE_BYTES};
use crate::trace::{Cmd, TraceRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundParams {
    pub address_space_base: u64,
    pub address_space_bytes: u64,
    /// Background records generated per metadata read in the request stream.
    pub reads_per_metadata_read: f64,
    pub write_fraction: f64,
    /// Share of records produced by sequential (streaming) phases.
    pub sequential_fraction: f64,
}

impl BackgroundParams {
    pub fn none() -> Self {
        Self {
            address_space_base: 0,
            address_space_bytes: 1 << 30,
            reads_per_metadata_read: 0.0,
            write_fraction: 0.0,
            sequential_fraction: 0.5,
        }
    }
}

const MIN_PHASE: u64 = 32;
const MAX_PHASE: u64 = 512;
/// Fraction of background reads logged as MemRdData rather than MemRd.
const READ_DATA_FRACTION: f64 = 0.25;

/// Streams `(cmd, addr)` pairs alternating between uniform-random and
/// sequential phases.
pub struct BackgroundGen {
    params: BackgroundParams,
    rng: ChaCha8Rng,
    lines: u64,
    phase_left: u64,
    sequential: bool,
    cursor: u64,
}

impl BackgroundGen {
    pub fn new(params: &BackgroundParams, seed: u64) -> Self {
        Self {
            params: params.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            lines: (params.address_space_bytes / LINE_BYTES).max(1),
            phase_left: 0,
            sequential: false,
            cursor: 0,
        }
    }

    pub fn next_access(&mut self) -> (Cmd, PhysAddr) {
        if self.phase_left == 0 {
            self.phase_left = self.rng.random_range(MIN_PHASE..=MAX_PHASE);
            self.sequential = self.rng.random_bool(self.params.sequential_fraction.clamp(0.0, 1.0));
            self.cursor = self.rng.random_range(0..self.lines);
        }
        self.phase_left -= 1;
        let line = if self.sequential {
            let l = self.cursor;
            self.cursor = (self.cursor + 1) % self.lines;
            l
        } else {
            self.rng.random_range(0..self.lines)
        };
        let cmd = if self.rng.random_bool(self.params.write_fraction.clamp(0.0, 1.0)) {
            Cmd::MemWr
        } else if self.rng.random_bool(READ_DATA_FRACTION) {
            Cmd::MemRdData
        } else {
            Cmd::MemRd
        };
        (cmd, PhysAddr(self.params.address_space_base + line * LINE_BYTES))
    }
}

/// A standalone background trace of `length` records.
pub fn background_traffic(params: &BackgroundParams, length: usize, seed: u64) -> Vec<TraceRecord> {
    let mut gen = BackgroundGen::new(params, seed);
    let mut clock = Clock::new(seed ^ 0xC10C);
    (0..length)
        .map(|_| {
            let (cmd, addr) = gen.next_access();
            TraceRecord {
                timestamp_ns: clock.tick(),
                cmd,
                addr,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const GIB: u64 = 1 << 30;

    fn params(write_fraction: f64, sequential_fraction: f64) -> BackgroundParams {
        BackgroundParams {
            address_space_base: 0,
            address_space_bytes: GIB,
            reads_per_metadata_read: 100.0,
            write_fraction,
            sequential_fraction,
        }
    }

    #[test]
    fn no_writes_when_fraction_zero() {
        let t = background_traffic(&params(0.0, 0.5), 50_000, 1);
        assert!(t.iter().all(|r| r.cmd != Cmd::MemWr));
        assert!(t.iter().any(|r| r.cmd == Cmd::MemRdData));
    }

    #[test]
    fn mixed_commands_and_bounds() {
        let t = background_traffic(&params(0.3, 0.5), 50_000, 2);
        let writes = t.iter().filter(|r| r.cmd == Cmd::MemWr).count() as f64;
        assert!((writes / 50_000.0 - 0.3).abs() < 0.02);
        assert!(t.iter().all(|r| r.addr.0 < GIB && r.addr.0 % 64 == 0));
    }

    #[test]
    fn million_records_monotone() {
        let t = background_traffic(&params(0.1, 0.5), 1_000_000, 3);
        assert_eq!(t.len(), 1_000_000);
        assert!(t.windows(2).all(|w| w[0].timestamp_ns <= w[1].timestamp_ns));
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            background_traffic(&params(0.1, 0.5), 1000, 9),
            background_traffic(&params(0.1, 0.5), 1000, 9)
        );
        assert_ne!(
            background_traffic(&params(0.1, 0.5), 1000, 9),
            background_traffic(&params(0.1, 0.5), 1000, 10)
        );
    }

    #[test]
    fn mailbox_hit_fraction_is_binomial() {
        // uniform phases only, so hits are independent Bernoulli trials
        let n = 1_000_000usize;
        let t = background_traffic(&params(0.0, 0.0), n, 4);
        let base = 0x1000_0000u64;
        let hits = t
            .iter()
            .filter(|r| (base..base + (4 << 20)).contains(&r.addr.0))
            .count() as f64;
        let p = 4.0 / 1024.0;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((hits - mean).abs() <= 3.0 * sigma, "hits {hits}, mean {mean}, sigma {sigma}");
    }
}
