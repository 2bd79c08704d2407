#![allow(dead_code)]

use memctx::channel::{run_channel, trace_index_of_requests, ChannelOutput, ChannelParams};
use memctx::encoder::{AppRequest, EncoderSession, MailboxPlacement, RequestOp, SessionOptions};
use memctx::schema::{serialize_event, Message};
use memctx::{ChannelConfig, Event};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GIB: u64 = 1 << 30;

pub fn dedicated() -> MailboxPlacement {
    MailboxPlacement::Dedicated {
        region: 4 * GIB..8 * GIB,
    }
}

/// A dedicated region that holds at least four windows of `cfg`.
pub fn dedicated_for(cfg: &ChannelConfig) -> MailboxPlacement {
    let unit = cfg.window_bytes().max(GIB);
    MailboxPlacement::Dedicated {
        region: 4 * unit..8 * unit,
    }
}

pub fn random_event(rng: &mut ChaCha8Rng) -> Event {
    match rng.random_range(0..3) {
        0 => {
            let len = rng.random_range(1..=8);
            let id: String = (0..len)
                .map(|_| rng.random_range(b'a'..=b'z') as char)
                .collect();
            Event::Marker {
                id,
                call_count: rng.random(),
            }
        }
        1 => Event::ObjectAlloc {
            object_id: rng.random(),
            virtual_addr: rng.random::<u64>() & !63,
            size_bytes: rng.random_range(64..1 << 30),
        },
        _ => Event::ObjectFree {
            object_id: rng.random(),
        },
    }
}

/// A session that transmits the preamble, mailbox info and `events`.
pub struct Scenario {
    pub session: EncoderSession,
    pub app: Vec<AppRequest>,
    /// Every event sent, mailbox info first.
    pub sent: Vec<Event>,
    /// Request range of each entry in `sent`.
    pub spans: Vec<std::ops::Range<usize>>,
}

impl Scenario {
    pub fn new(cfg: ChannelConfig, events: &[Event], reps: u32, seed: u64) -> Scenario {
        let opts = SessionOptions {
            repetitions: reps,
            ..SessionOptions::default()
        };
        let mut session = EncoderSession::open(cfg, &dedicated_for(&cfg), seed, opts).unwrap();
        let mut app = session.emit_preamble().unwrap();
        let info = Event::MailboxInfo {
            virtual_base: session.virtual_base(),
            pid: session.pid(),
        };
        let mut sent = vec![info];
        let mut spans = Vec::new();
        let start = app.len();
        app.extend(session.send_mailbox_info().unwrap());
        spans.push(start..app.len());
        for e in events {
            let start = app.len();
            app.extend(session.send_event(e).unwrap());
            spans.push(start..app.len());
            sent.push(e.clone());
        }
        Scenario {
            session,
            app,
            sent,
            spans,
        }
    }

    pub fn run(&self, params: &ChannelParams) -> ChannelOutput {
        run_channel(&self.app, params).unwrap()
    }

    /// Earliest trace index among the surviving reads of each sent event.
    pub fn first_trace_indices(&self, out: &ChannelOutput) -> Vec<Option<usize>> {
        let idx = trace_index_of_requests(out, self.app.len());
        self.spans
            .iter()
            .map(|r| {
                r.clone()
                    .filter(|&i| self.app[i].op == RequestOp::ReadLine)
                    .filter_map(|i| idx[i])
                    .min()
            })
            .collect()
    }

    /// All `(A, B)` pairs transmitted, preamble included.
    pub fn sent_pairs(&self) -> std::collections::HashSet<(u32, u32)> {
        let cfg = self.session.config();
        let mut msgs: Vec<Message> = memctx::schema::preamble_sequence(cfg);
        for e in &self.sent {
            msgs.extend(serialize_event(e, cfg).unwrap());
        }
        msgs.iter().map(|m| (m.a.0, m.b.0)).collect()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
