//! Memory channel model between the application and the trace logger.
//!
//! Pipeline, in order:
//!
//! 1. duplicate-read suppression on the request stream (load forwarding)
//! 2. merge with background traffic
//! 3. prefetch injection, driven by the merged demand reads
//! 4. bounded reordering (request scheduling)
//! 5. timestamping, 10 ns per record plus up to 5 ns jitter
//!
//! Metadata reads are only ever dropped, delayed or surrounded by noise,
//! never rewritten.

pub mod background;
pub mod prefetch;

use std::fmt::Write as _;
use std::num::NonZeroUsize;

use lru::LruCache;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use background::{background_traffic, BackgroundParams};
pub use prefetch::PrefetcherModel;

use crate::codec::{PhysAddr, LINE_BYTES};
use crate::encoder::{AppRequest, RequestOp, RequestOrigin};
use crate::error::{Error, Result};
use crate::trace::{Cmd, TraceOrigin, TraceRecord, TruthEntry};

pub const NS_PER_RECORD: u64 = 10;
pub const MAX_JITTER_NS: u64 = 5;
pub const DEFAULT_DUP_HISTORY: usize = 1024;

const STAGE_SUPPRESS: u64 = 0x5355_5050;
const STAGE_BACKGROUND: u64 = 0x4247_4E44;
const STAGE_MERGE: u64 = 0x4D52_4745;
const STAGE_REORDER: u64 = 0x524F_5244;
const STAGE_CLOCK: u64 = 0x434C_4F43;

/// Independent seed per pipeline stage, so changing one stage's parameters
/// leaves the other stages' random streams untouched.
fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Record timestamps: `10 ns * k` plus jitter in `[0, 5]`, so nondecreasing.
pub struct Clock {
    rng: ChaCha8Rng,
    k: u64,
}

impl Clock {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            k: 0,
        }
    }

    pub fn tick(&mut self) -> u64 {
        let t = self.k * NS_PER_RECORD + self.rng.random_range(0..=MAX_JITTER_NS);
        self.k += 1;
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelParams {
    pub reorder_depth: usize,
    pub dup_suppress_prob: f64,
    pub dup_history: usize,
    /// Whether a flush clears the line from the forwarding history.
    pub honor_flushes: bool,
    pub prefetcher: PrefetcherModel,
    pub background: BackgroundParams,
    pub rng_seed: u64,
}

impl ChannelParams {
    /// Pass-through channel: no loss, no reordering, no noise.
    pub fn identity() -> Self {
        Self {
            reorder_depth: 0,
            dup_suppress_prob: 0.0,
            dup_history: DEFAULT_DUP_HISTORY,
            honor_flushes: true,
            prefetcher: PrefetcherModel::None,
            background: BackgroundParams::none(),
            rng_seed: 0,
        }
    }

    /// Reorder depth 32, suppression p=0.5, stride prefetcher (64 entries,
    /// degree 4) and 100 background records per metadata read over 1 GiB.
    pub fn adversarial(seed: u64) -> Self {
        Self {
            reorder_depth: 32,
            dup_suppress_prob: 0.5,
            dup_history: DEFAULT_DUP_HISTORY,
            honor_flushes: true,
            prefetcher: PrefetcherModel::Stride {
                table_size: 64,
                degree: 4,
            },
            background: BackgroundParams {
                address_space_base: 0,
                address_space_bytes: 1 << 30,
                reads_per_metadata_read: 100.0,
                write_fraction: 0.2,
                sequential_fraction: 0.5,
            },
            rng_seed: seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dup_suppress_prob) {
            return Err(Error::InvalidParams(format!(
                "dup_suppress_prob {} outside [0, 1]",
                self.dup_suppress_prob
            )));
        }
        let bg = &self.background;
        if !(bg.reads_per_metadata_read >= 0.0 && bg.reads_per_metadata_read.is_finite()) {
            return Err(Error::InvalidParams("background ratio must be >= 0".into()));
        }
        for (name, v) in [
            ("write_fraction", bg.write_fraction),
            ("sequential_fraction", bg.sequential_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParams(format!("{name} {v} outside [0, 1]")));
            }
        }
        if bg.address_space_bytes < LINE_BYTES {
            return Err(Error::InvalidParams("background address space too small".into()));
        }
        if self.dup_history == 0 {
            return Err(Error::InvalidParams("dup_history must be >= 1".into()));
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn std::fmt::Display| Error::InvalidParams(format!("{key}={value}: {e}"));
        let v = value.trim();
        match key.trim() {
            "reorder_depth" => self.reorder_depth = v.parse().map_err(|e| bad(&e))?,
            "dup_suppress_prob" => self.dup_suppress_prob = v.parse().map_err(|e| bad(&e))?,
            "dup_history" => self.dup_history = v.parse().map_err(|e| bad(&e))?,
            "honor_flushes" => self.honor_flushes = v.parse().map_err(|e| bad(&e))?,
            "prefetcher" => self.prefetcher = v.parse().map_err(|e: String| bad(&e))?,
            "background_base" => {
                self.background.address_space_base =
                    crate::serde_hex::parse_hex(v).or_else(|_| v.parse().map_err(|e| bad(&e)))?
            }
            "background_bytes" => {
                self.background.address_space_bytes =
                    crate::serde_hex::parse_hex(v).or_else(|_| v.parse().map_err(|e| bad(&e)))?
            }
            "background_ratio" => {
                self.background.reads_per_metadata_read = v.parse().map_err(|e| bad(&e))?
            }
            "write_fraction" => self.background.write_fraction = v.parse().map_err(|e| bad(&e))?,
            "sequential_fraction" => {
                self.background.sequential_fraction = v.parse().map_err(|e| bad(&e))?
            }
            "rng_seed" => self.rng_seed = v.parse().map_err(|e| bad(&e))?,
            other => return Err(Error::InvalidParams(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a flat `key=value` file on top of `self`. `#` starts a comment.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidParams(format!("line {}: expected key=value", n + 1))
            })?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let bg = &self.background;
        let _ = writeln!(s, "reorder_depth={}", self.reorder_depth);
        let _ = writeln!(s, "dup_suppress_prob={}", self.dup_suppress_prob);
        let _ = writeln!(s, "dup_history={}", self.dup_history);
        let _ = writeln!(s, "honor_flushes={}", self.honor_flushes);
        let _ = writeln!(s, "prefetcher={}", self.prefetcher);
        let _ = writeln!(s, "background_base={:#x}", bg.address_space_base);
        let _ = writeln!(s, "background_bytes={:#x}", bg.address_space_bytes);
        let _ = writeln!(s, "background_ratio={}", bg.reads_per_metadata_read);
        let _ = writeln!(s, "write_fraction={}", bg.write_fraction);
        let _ = writeln!(s, "sequential_fraction={}", bg.sequential_fraction);
        let _ = writeln!(s, "rng_seed={}", self.rng_seed);
        s
    }
}

/// Indices of the requests that survive duplicate-read suppression.
///
/// A read of a line seen among the last `history` distinct lines is dropped
/// with probability `p`. With `honor_flushes`, a flush removes the line from
/// the history. Flushes themselves are always kept.
pub fn surviving_requests(
    stream: &[AppRequest],
    p: f64,
    history: usize,
    honor_flushes: bool,
    seed: u64,
) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: LruCache<u64, ()> = LruCache::new(NonZeroUsize::new(history.max(1)).unwrap());
    let mut keep = Vec::with_capacity(stream.len());
    for (i, r) in stream.iter().enumerate() {
        let line = r.addr.line();
        match r.op {
            RequestOp::FlushLine => {
                if honor_flushes {
                    seen.pop(&line);
                }
                keep.push(i);
            }
            RequestOp::ReadLine => {
                if seen.get(&line).is_some() {
                    if p > 0.0 && rng.random_bool(p) {
                        continue;
                    }
                } else {
                    seen.put(line, ());
                }
                keep.push(i);
            }
        }
    }
    keep
}

pub fn suppress_duplicates(
    stream: &[AppRequest],
    p: f64,
    history: usize,
    honor_flushes: bool,
    seed: u64,
) -> Vec<AppRequest> {
    surviving_requests(stream, p, history, honor_flushes, seed)
        .into_iter()
        .map(|i| stream[i])
        .collect()
}

/// Bounded random reordering through a `depth`-slot buffer.
///
/// Each output is drawn uniformly from the buffered items, except that an
/// item about to exceed `depth` positions of delay is emitted first. No
/// item moves more than `depth` positions in either direction.
pub fn reorder<T>(stream: Vec<T>, depth: usize, seed: u64) -> Vec<T> {
    if depth == 0 {
        return stream;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(stream.len());
    let mut buf: Vec<(usize, T)> = Vec::with_capacity(depth + 1);
    let emit = |buf: &mut Vec<(usize, T)>, out: &mut Vec<T>, rng: &mut ChaCha8Rng| {
        let pos = out.len();
        let oldest = (0..buf.len()).min_by_key(|&i| buf[i].0).unwrap();
        let pick = if buf[oldest].0 + depth <= pos {
            oldest
        } else {
            rng.random_range(0..buf.len())
        };
        out.push(buf.swap_remove(pick).1);
    };
    for (i, item) in stream.into_iter().enumerate() {
        buf.push((i, item));
        if buf.len() > depth {
            emit(&mut buf, &mut out, &mut rng);
        }
    }
    while !buf.is_empty() {
        emit(&mut buf, &mut out, &mut rng);
    }
    out
}

/// A record travelling through the channel with its ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InFlight {
    pub cmd: Cmd,
    pub addr: PhysAddr,
    pub truth: TruthEntry,
}

/// Inserts prefetcher reads after the demand reads that trigger them.
pub fn prefetch_inject(stream: Vec<InFlight>, model: PrefetcherModel) -> Vec<InFlight> {
    if model == PrefetcherModel::None {
        return stream;
    }
    let mut pf = prefetch::build(model);
    let mut out = Vec::with_capacity(stream.len() + stream.len() / 8);
    let mut issued = Vec::new();
    for rec in stream {
        let demand_read = rec.cmd.is_read() && rec.truth.origin != TraceOrigin::Prefetch;
        out.push(rec);
        if demand_read {
            issued.clear();
            pf.observe(rec.addr.0, &mut issued);
            out.extend(issued.iter().map(|&a| InFlight {
                cmd: Cmd::MemRdData,
                addr: PhysAddr(a),
                truth: TruthEntry {
                    origin: TraceOrigin::Prefetch,
                    app_index: None,
                },
            }));
        }
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct ChannelOutput {
    pub trace: Vec<TraceRecord>,
    pub truth: Vec<TruthEntry>,
}

impl ChannelOutput {
    pub fn count(&self, origin: TraceOrigin) -> usize {
        self.truth.iter().filter(|t| t.origin == origin).count()
    }
}

pub fn run_channel(app: &[AppRequest], params: &ChannelParams) -> Result<ChannelOutput> {
    params.validate()?;
    let seed = params.rng_seed;
    let kept = surviving_requests(
        app,
        params.dup_suppress_prob,
        params.dup_history,
        params.honor_flushes,
        stage_seed(seed, STAGE_SUPPRESS),
    );
    let reads: Vec<InFlight> = kept
        .into_iter()
        .filter(|&i| app[i].op == RequestOp::ReadLine)
        .map(|i| InFlight {
            cmd: Cmd::MemRd,
            addr: app[i].addr,
            truth: TruthEntry {
                origin: match app[i].origin {
                    RequestOrigin::Metadata => TraceOrigin::Metadata,
                    RequestOrigin::Payload => TraceOrigin::Payload,
                },
                app_index: Some(i as u32),
            },
        })
        .collect();

    let meta_reads = app
        .iter()
        .filter(|r| r.op == RequestOp::ReadLine && r.origin == RequestOrigin::Metadata)
        .count();
    let n_bg = (params.background.reads_per_metadata_read * meta_reads as f64).round() as usize;
    let mut bg = background::BackgroundGen::new(&params.background, stage_seed(seed, STAGE_BACKGROUND));
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, STAGE_MERGE));
    // Background is spread uniformly over the gaps before metadata reads
    // (and after the last one); payload reads keep their place and add no
    // slots, so the ratio holds around metadata even in payload-heavy runs.
    let mut merged = Vec::with_capacity(reads.len() + n_bg);
    let mut meta_left = reads
        .iter()
        .filter(|r| r.truth.origin == TraceOrigin::Metadata)
        .count();
    let mut bg_left = n_bg;
    let mut app_iter = reads.into_iter().peekable();
    loop {
        if app_iter
            .peek()
            .is_some_and(|r| r.truth.origin != TraceOrigin::Metadata)
        {
            merged.push(app_iter.next().expect("peeked"));
            continue;
        }
        if meta_left + bg_left == 0 {
            break;
        }
        let take_app = rng.random_range(0..meta_left + bg_left) < meta_left;
        if take_app {
            merged.push(app_iter.next().expect("metadata records remain"));
            meta_left -= 1;
        } else {
            let (cmd, addr) = bg.next_access();
            merged.push(InFlight {
                cmd,
                addr,
                truth: TruthEntry {
                    origin: TraceOrigin::Background,
                    app_index: None,
                },
            });
            bg_left -= 1;
        }
    }

    let with_pf = prefetch_inject(merged, params.prefetcher);
    let ordered = reorder(with_pf, params.reorder_depth, stage_seed(seed, STAGE_REORDER));

    let mut clock = Clock::new(stage_seed(seed, STAGE_CLOCK));
    let mut out = ChannelOutput {
        trace: Vec::with_capacity(ordered.len()),
        truth: Vec::with_capacity(ordered.len()),
    };
    for r in ordered {
        out.trace.push(TraceRecord {
            timestamp_ns: clock.tick(),
            cmd: r.cmd,
            addr: r.addr,
        });
        out.truth.push(r.truth);
    }
    Ok(out)
}

/// Ground-truth lookup from each application request to its trace index.
pub fn trace_index_of_requests(out: &ChannelOutput, app_len: usize) -> Vec<Option<usize>> {
    let mut idx = vec![None; app_len];
    for (t, e) in out.truth.iter().enumerate() {
        if let Some(a) = e.app_index {
            idx[a as usize] = Some(t);
        }
    }
    idx
}

/// Largest distance between an item's input and output positions, for a
/// reordered `0..n` sequence.
pub fn max_displacement(perm: &[usize]) -> usize {
    perm.iter()
        .enumerate()
        .map(|(pos, &orig)| pos.abs_diff(orig))
        .max()
        .unwrap_or(0)
}
