//! Hardware prefetcher models that turn demand reads into speculative reads.

use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;

use lru::LruCache;

use crate::codec::LINE_BYTES;

/// Stride detection region (one 4 KiB page).
pub const STRIDE_REGION_BITS: u32 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefetcherModel {
    None,
    NextLine { degree: usize },
    Stride { table_size: usize, degree: usize },
}

impl fmt::Display for PrefetcherModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PrefetcherModel::None => f.write_str("none"),
            PrefetcherModel::NextLine { degree } => write!(f, "next_line:{degree}"),
            PrefetcherModel::Stride { table_size, degree } => write!(f, "stride:{table_size}:{degree}"),
        }
    }
}

impl FromStr for PrefetcherModel {
    type Err = String;

    /// `none`, `next_line:DEGREE` or `stride:TABLE:DEGREE`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| {
            p.parse::<usize>()
                .map_err(|e| format!("bad prefetcher field {p:?}: {e}"))
        };
        match parts.as_slice() {
            ["none"] => Ok(PrefetcherModel::None),
            ["next_line", d] => Ok(PrefetcherModel::NextLine { degree: num(d)? }),
            ["stride", t, d] => Ok(PrefetcherModel::Stride {
                table_size: num(t)?,
                degree: num(d)?,
            }),
            _ => Err(format!("unknown prefetcher {s:?}")),
        }
    }
}

pub trait Prefetcher {
    /// Observes a demand read and returns line addresses to prefetch.
    fn observe(&mut self, addr: u64, out: &mut Vec<u64>);
}

pub struct NoPrefetcher;

impl Prefetcher for NoPrefetcher {
    fn observe(&mut self, _addr: u64, _out: &mut Vec<u64>) {}
}

pub struct NextLinePrefetcher {
    degree: usize,
}

impl NextLinePrefetcher {
    pub fn new(degree: usize) -> Self {
        Self { degree }
    }
}

impl Prefetcher for NextLinePrefetcher {
    fn observe(&mut self, addr: u64, out: &mut Vec<u64>) {
        let line = addr & !(LINE_BYTES - 1);
        for k in 1..=self.degree as u64 {
            out.push(line.wrapping_add(k * LINE_BYTES));
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct StrideEntry {
    last: u64,
    stride: i64,
    confirmed: bool,
    /// Furthest line already prefetched along the current stride.
    frontier: Option<u64>,
}

/// Per-page reference prediction table with LRU replacement.
///
/// An entry confirms a stride once two consecutive deltas match; every
/// further access along the stride tops up `degree` lines ahead. Repeated
/// accesses to the same line are ignored.
pub struct StridePrefetcher {
    table: LruCache<u64, StrideEntry>,
    degree: usize,
}

impl StridePrefetcher {
    pub fn new(table_size: usize, degree: usize) -> Self {
        Self {
            table: LruCache::new(NonZeroUsize::new(table_size.max(1)).unwrap()),
            degree,
        }
    }
}

impl Prefetcher for StridePrefetcher {
    fn observe(&mut self, addr: u64, out: &mut Vec<u64>) {
        let line = addr & !(LINE_BYTES - 1);
        let region = line >> STRIDE_REGION_BITS;
        let Some(e) = self.table.get_mut(&region) else {
            self.table.put(
                region,
                StrideEntry {
                    last: line,
                    stride: 0,
                    confirmed: false,
                    frontier: None,
                },
            );
            return;
        };
        let delta = line.wrapping_sub(e.last) as i64;
        if delta == 0 {
            return;
        }
        if delta == e.stride {
            e.confirmed = true;
            for k in 1..=self.degree as i64 {
                let target = line.wrapping_add((e.stride * k) as u64);
                let fresh = match e.frontier {
                    None => true,
                    Some(f) if e.stride > 0 => target > f,
                    Some(f) => target < f,
                };
                if fresh {
                    out.push(target);
                    e.frontier = Some(target);
                }
            }
        } else {
            e.stride = delta;
            e.confirmed = false;
            e.frontier = None;
        }
        e.last = line;
    }
}

pub fn build(model: PrefetcherModel) -> Box<dyn Prefetcher> {
    match model {
        PrefetcherModel::None => Box::new(NoPrefetcher),
        PrefetcherModel::NextLine { degree } => Box::new(NextLinePrefetcher::new(degree)),
        PrefetcherModel::Stride { table_size, degree } => {
            Box::new(StridePrefetcher::new(table_size, degree))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(p: &mut dyn Prefetcher, addrs: &[u64]) -> Vec<Vec<u64>> {
        addrs
            .iter()
            .map(|&a| {
                let mut v = Vec::new();
                p.observe(a, &mut v);
                v
            })
            .collect()
    }

    #[test]
    fn next_line_degree_one() {
        let mut p = NextLinePrefetcher::new(1);
        assert_eq!(run(&mut p, &[0x1000]), vec![vec![0x1040]]);
    }

    #[test]
    fn stride_example() {
        let x = 0x10_0000;
        let mut p = StridePrefetcher::new(64, 2);
        let got = run(&mut p, &[x, x + 128, x + 256]);
        assert_eq!(got, vec![vec![], vec![], vec![x + 384, x + 512]]);
        // the next access along the stride tops up one line
        assert_eq!(run(&mut p, &[x + 384]), vec![vec![x + 640]]);
    }

    #[test]
    fn stride_ignores_same_line_and_irregular_access() {
        let x = 0x20_0000;
        let mut p = StridePrefetcher::new(64, 4);
        let got = run(&mut p, &[x, x, x + 64, x + 64, x + 64, x + 256, x + 320]);
        assert!(got.iter().all(|v| v.is_empty()), "{got:?}");
        let mut p = StridePrefetcher::new(64, 4);
        assert_eq!(run(&mut p, &[x, x, x + 64, x + 64, x + 128])[4].len(), 4);
    }

    #[test]
    fn negative_stride() {
        let x = 0x30_0800;
        let mut p = StridePrefetcher::new(8, 1);
        let got = run(&mut p, &[x, x - 64, x - 128]);
        assert_eq!(got[2], vec![x - 192]);
    }

    #[test]
    fn table_eviction_forgets_streams() {
        let mut p = StridePrefetcher::new(1, 1);
        let a = 0x100_0000;
        let b = 0x200_0000;
        let got = run(&mut p, &[a, a + 64, b, a + 128]);
        assert!(got.iter().all(|v| v.is_empty()));
    }

    #[test]
    fn model_strings() {
        for m in [
            PrefetcherModel::None,
            PrefetcherModel::NextLine { degree: 2 },
            PrefetcherModel::Stride {
                table_size: 64,
                degree: 4,
            },
        ] {
            assert_eq!(m.to_string().parse::<PrefetcherModel>().unwrap(), m);
        }
        assert!("stride:4".parse::<PrefetcherModel>().is_err());
    }
}
