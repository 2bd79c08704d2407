//! Object lifetimes recovered from decoded allocation events.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use super::DecodedEvent;
use crate::schema::Event;
use crate::serde_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObjectLifetime {
    pub object_id: u16,
    #[serde(with = "serde_hex")]
    pub mailbox: u64,
    #[serde(with = "serde_hex")]
    pub virtual_addr: u64,
    pub size_bytes: u64,
    /// Physical range `[phys_start, phys_end)`.
    #[serde(with = "serde_hex")]
    pub phys_start: u64,
    #[serde(with = "serde_hex")]
    pub phys_end: u64,
    pub alloc_index: usize,
    pub alloc_ts: u64,
    pub free_index: Option<usize>,
    pub free_ts: Option<u64>,
    /// Another live object overlapped this one's range when it was allocated.
    pub overlapping: bool,
}

impl ObjectLifetime {
    pub fn live_at(&self, index: usize) -> bool {
        index >= self.alloc_index && self.free_index.is_none_or(|f| index < f)
    }

    pub fn contains(&self, addr: u64) -> bool {
        (self.phys_start..self.phys_end).contains(&addr)
    }
}

/// Virtual-minus-physical offset announced by a mailbox info event.
pub fn vp_offset(e: &DecodedEvent) -> Option<i64> {
    match e.event {
        Event::MailboxInfo { virtual_base, .. } => {
            Some(virtual_base.wrapping_sub(e.mailbox) as i64)
        }
        _ => None,
    }
}

/// Virtual address of physical `addr` under offset `vp`.
pub fn phys_to_virt(addr: u64, vp: i64) -> u64 {
    addr.wrapping_add(vp as u64)
}

pub fn virt_to_phys(vaddr: u64, vp: i64) -> u64 {
    vaddr.wrapping_sub(vp as u64)
}

/// Registry of object lifetimes, queryable by trace position and address.
#[derive(Debug, Default)]
pub struct ObjectRegistry {
    objects: Vec<ObjectLifetime>,
    by_start: BTreeMap<u64, Vec<usize>>,
    max_len: u64,
    /// Allocation events skipped because their mailbox never announced its base.
    pub unmapped: usize,
    /// Free events with no matching live allocation.
    pub unmatched_frees: usize,
}

impl ObjectRegistry {
    /// Builds lifetimes from decoded events in trace order. Each event's
    /// physical range uses the offset of the most recent info event from
    /// the same mailbox.
    pub fn from_events(events: &[DecodedEvent]) -> Self {
        let mut reg = ObjectRegistry::default();
        let mut ordered: Vec<&DecodedEvent> = events.iter().collect();
        ordered.sort_by_key(|e| e.first_index);
        let mut offsets: HashMap<u64, i64> = HashMap::new();
        let mut open: HashMap<(u64, u16), usize> = HashMap::new();
        for e in ordered {
            match e.event {
                Event::MailboxInfo { .. } => {
                    offsets.insert(e.mailbox, vp_offset(e).unwrap());
                }
                Event::ObjectAlloc {
                    object_id,
                    virtual_addr,
                    size_bytes,
                } => {
                    let Some(&off) = offsets.get(&e.mailbox) else {
                        reg.unmapped += 1;
                        continue;
                    };
                    let phys_start = virt_to_phys(virtual_addr, off);
                    let mut obj = ObjectLifetime {
                        object_id,
                        mailbox: e.mailbox,
                        virtual_addr,
                        size_bytes,
                        phys_start,
                        phys_end: phys_start.saturating_add(size_bytes),
                        alloc_index: e.first_index,
                        alloc_ts: e.first_ts,
                        free_index: None,
                        free_ts: None,
                        overlapping: false,
                    };
                    for o in reg.live_overlaps(&obj) {
                        reg.objects[o].overlapping = true;
                        obj.overlapping = true;
                    }
                    let id = reg.objects.len();
                    reg.max_len = reg.max_len.max(size_bytes);
                    reg.by_start.entry(phys_start).or_default().push(id);
                    reg.objects.push(obj);
                    // A re-allocation of a live id closes the previous lifetime.
                    if let Some(prev) = open.insert((e.mailbox, object_id), id) {
                        reg.close(prev, e.first_index, e.first_ts);
                    }
                }
                Event::ObjectFree { object_id } => match open.remove(&(e.mailbox, object_id)) {
                    Some(id) => reg.close(id, e.first_index, e.first_ts),
                    None => reg.unmatched_frees += 1,
                },
                Event::Marker { .. } => {}
            }
        }
        reg
    }

    fn close(&mut self, id: usize, index: usize, ts: u64) {
        let o = &mut self.objects[id];
        if o.free_index.is_none() {
            o.free_index = Some(index);
            o.free_ts = Some(ts);
        }
    }

    fn live_overlaps(&self, obj: &ObjectLifetime) -> Vec<usize> {
        self.objects
            .iter()
            .enumerate()
            .filter(|(_, o)| {
                o.free_index.is_none()
                    && o.phys_start < obj.phys_end
                    && obj.phys_start < o.phys_end
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn objects(&self) -> &[ObjectLifetime] {
        &self.objects
    }

    /// The object live at trace position `index` whose physical range holds
    /// `addr`. When ranges overlap, the latest allocation wins.
    pub fn attribute(&self, index: usize, addr: u64) -> Option<&ObjectLifetime> {
        self.lookup(index, addr).map(|i| &self.objects[i])
    }

    /// Like [`ObjectRegistry::attribute`], returning a position in [`ObjectRegistry::objects`].
    pub fn lookup(&self, index: usize, addr: u64) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (&start, ids) in self.by_start.range(..=addr).rev() {
            if start.saturating_add(self.max_len) <= addr {
                break;
            }
            for &id in ids {
                let o = &self.objects[id];
                if o.contains(addr)
                    && o.live_at(index)
                    && best.is_none_or(|b| o.alloc_index > self.objects[b].alloc_index)
                {
                    best = Some(id);
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(event: Event, mailbox: u64, index: usize) -> DecodedEvent {
        DecodedEvent {
            event,
            mailbox,
            first_index: index,
            last_index: index + 5,
            first_ts: 10 * index as u64,
            last_ts: 10 * index as u64 + 50,
        }
    }

    const MB: u64 = 0x4000_0000;
    const VBASE: u64 = 0x7F00_0000_0000;

    fn info(index: usize) -> DecodedEvent {
        ev(
            Event::MailboxInfo {
                virtual_base: VBASE,
                pid: 3,
            },
            MB,
            index,
        )
    }

    fn alloc(id: u16, vaddr: u64, size: u64, index: usize) -> DecodedEvent {
        ev(
            Event::ObjectAlloc {
                object_id: id,
                virtual_addr: vaddr,
                size_bytes: size,
            },
            MB,
            index,
        )
    }

    #[test]
    fn offset_is_virtual_minus_physical() {
        assert_eq!(vp_offset(&info(0)), Some((VBASE - MB) as i64));
        let low = ev(
            Event::MailboxInfo {
                virtual_base: 0x1000,
                pid: 1,
            },
            0x4000,
            0,
        );
        assert_eq!(vp_offset(&low), Some(-0x3000));
        assert_eq!(phys_to_virt(0x4040, -0x3000), 0x1040);
        assert_eq!(virt_to_phys(0x1040, -0x3000), 0x4040);
        assert_eq!(vp_offset(&alloc(1, 0, 1, 0)), None);
    }

    #[test]
    fn attribution_respects_range_and_lifetime() {
        let off = VBASE - MB;
        let events = vec![
            info(0),
            alloc(1, off + 0x1000_0000, 4096, 100),
            ev(Event::ObjectFree { object_id: 1 }, MB, 500),
        ];
        let reg = ObjectRegistry::from_events(&events);
        let o = &reg.objects()[0];
        assert_eq!((o.phys_start, o.phys_end), (0x1000_0000, 0x1000_1000));
        assert_eq!(o.free_index, Some(500));
        assert!(reg.attribute(200, 0x1000_0040).is_some());
        assert!(reg.attribute(99, 0x1000_0040).is_none());
        assert!(reg.attribute(500, 0x1000_0040).is_none());
        assert!(reg.attribute(200, 0x1000_1000).is_none());
    }

    #[test]
    fn overlapping_latest_wins() {
        let off = VBASE - MB;
        let events = vec![
            info(0),
            alloc(1, off + 0x2000_0000, 1 << 20, 10),
            alloc(2, off + 0x2008_0000, 4096, 20),
        ];
        let reg = ObjectRegistry::from_events(&events);
        assert_eq!(reg.attribute(30, 0x2008_0040).unwrap().object_id, 2);
        assert_eq!(reg.attribute(15, 0x2008_0040).unwrap().object_id, 1);
        assert_eq!(reg.attribute(30, 0x2000_0040).unwrap().object_id, 1);
        assert!(reg.objects().iter().all(|o| o.overlapping));
    }

    #[test]
    fn unmapped_and_unmatched_counted() {
        let events = vec![
            alloc(1, 0x1000, 64, 5),
            ev(Event::ObjectFree { object_id: 9 }, MB, 6),
        ];
        let reg = ObjectRegistry::from_events(&events);
        assert_eq!((reg.unmapped, reg.unmatched_frees), (1, 1));
    }

    #[test]
    fn lookup_matches_linear_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let off = VBASE - MB;
        let mut events = vec![info(0)];
        for id in 0..200u16 {
            let start = rng.random_range(0..1u64 << 24) & !63;
            let size = rng.random_range(64..1u64 << 16);
            events.push(alloc(id, off + start, size, 10 + 3 * id as usize));
        }
        let reg = ObjectRegistry::from_events(&events);
        for _ in 0..5000 {
            let addr = rng.random_range(0..1u64 << 24);
            let idx = rng.random_range(0..1000);
            let linear = reg
                .objects()
                .iter()
                .filter(|o| o.contains(addr) && o.live_at(idx))
                .max_by_key(|o| o.alloc_index);
            assert_eq!(reg.attribute(idx, addr), linear);
        }
    }
}
