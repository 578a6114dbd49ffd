//! NIC side of a receive descriptor ring.
//!
//! The emulated NIC owns the circular region `[head, tail_register)` and
//! stops filling when `head == tail_register`; software owns the rest. A
//! fresh ring starts with `head = start` and `tail_register = start - 1`, so
//! one slot is always held back by software.
//!
//! Every tail-register write goes through [`NicRing::observe_tail_write`],
//! which checks that the released slots form one contiguous run of
//! consumed-and-replaced descriptors, i.e. that the NIC could not tell the
//! consumer side apart from a single sequential driver.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crossbeam_utils::CachePadded;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mempool::{BufHandle, Mempool, PoolError};

/// Payload stand-in. Only metadata travels through the ring.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Packet {
    pub seq: u64,
    pub flow_id: u32,
    pub size_bytes: u32,
    /// Nanoseconds, simulated or wall-clock depending on the run.
    pub t_inject: u64,
    pub t_deliver: Option<u64>,
}

impl Packet {
    pub fn new(seq: u64, flow_id: u32, size_bytes: u32, t_inject: u64) -> Self {
        Self {
            seq,
            flow_id,
            size_bytes,
            t_inject,
            t_deliver: None,
        }
    }

    /// Fixed-width little-endian encoding, used to compare delivered streams
    /// byte for byte.
    pub fn to_bytes(&self) -> [u8; 33] {
        let mut b = [0u8; 33];
        b[0..8].copy_from_slice(&self.seq.to_le_bytes());
        b[8..12].copy_from_slice(&self.flow_id.to_le_bytes());
        b[12..16].copy_from_slice(&self.size_bytes.to_le_bytes());
        b[16..24].copy_from_slice(&self.t_inject.to_le_bytes());
        if let Some(t) = self.t_deliver {
            b[24] = 1;
            b[25..33].copy_from_slice(&t.to_le_bytes());
        }
        b
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RingError {
    #[error("ring size {0} is not a power of two")]
    NotPowerOfTwo(u32),
    #[error("ring of {0} slots cannot be populated: {1}")]
    Populate(u32, PoolError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    /// Released slot still has its DD flag set (never consumed).
    DdStillSet,
    /// Released slot holds no replacement buffer.
    NoReplacement,
    /// Released slot was not filled by the NIC since it was last handed over,
    /// i.e. the tail moved past the head or backwards.
    NotConsumed,
    /// Two tail writes overlapped.
    ConcurrentWrite,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize)]
#[error("transparency violation at slot {slot} (tail {old_tail} -> {new_tail}): {kind:?}")]
pub struct TransparencyViolation {
    pub old_tail: u32,
    pub new_tail: u32,
    pub slot: u32,
    pub kind: ViolationKind,
}

/// One ring slot.
#[derive(Debug)]
pub struct Descriptor {
    dd: AtomicBool,
    buf: AtomicU32,
    // Emulator bookkeeping: times the NIC filled this slot and times it was
    // handed to the NIC. The NIC may fill only when fills < grants.
    fills: AtomicU64,
    grants: AtomicU64,
}

impl Descriptor {
    /// DD flag with acquire ordering: observing `true` makes the packet in
    /// the slot's buffer visible.
    #[inline]
    pub fn is_done(&self) -> bool {
        self.dd.load(Ordering::Acquire)
    }

    /// Current buffer handle, if any.
    pub fn buffer(&self) -> Option<BufHandle> {
        match self.buf.load(Ordering::Acquire) {
            BufHandle::NONE => None,
            h => Some(BufHandle(h)),
        }
    }

    /// Takes the filled buffer out of the slot, installs `fresh` and clears
    /// DD. The returned handle is whatever the slot held, filled or not.
    #[inline]
    pub fn replace(&self, fresh: BufHandle) -> BufHandle {
        let old = self.buf.swap(fresh.0, Ordering::AcqRel);
        self.dd.store(false, Ordering::Release);
        BufHandle(old)
    }

    /// Number of times the NIC filled this slot.
    pub fn generation(&self) -> u64 {
        self.fills.load(Ordering::Acquire)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RingSnapshot {
    pub head: u32,
    pub tail_register: u32,
    pub dropped_count: u64,
}

#[derive(Debug)]
pub struct NicRing {
    slots: Box<[Descriptor]>,
    mask: u32,
    pool: Arc<Mempool>,
    head: CachePadded<AtomicU32>,
    tail_register: CachePadded<AtomicU32>,
    dropped: AtomicU64,
    installed: AtomicU64,
    released: AtomicU64,
    violations: AtomicU64,
    ownership_violations: AtomicU64,
    tail_writing: AtomicBool,
    tail_trace: Option<Mutex<Vec<u64>>>,
}

impl NicRing {
    /// Ring with `head = 0`, `tail_register = ring_size - 1`.
    pub fn new(ring_size: u32, pool: Arc<Mempool>) -> Result<Self, RingError> {
        Self::with_start(ring_size, pool, 0)
    }

    /// Ring whose NIC head starts at `start_slot`; software holds back the
    /// slot just before it.
    pub fn with_start(ring_size: u32, pool: Arc<Mempool>, start_slot: u32) -> Result<Self, RingError> {
        if !ring_size.is_power_of_two() || ring_size < 2 {
            return Err(RingError::NotPowerOfTwo(ring_size));
        }
        let mask = ring_size - 1;
        let start = start_slot & mask;
        let tail = start.wrapping_sub(1) & mask;
        let bufs = pool
            .bulk_alloc(ring_size as usize)
            .map_err(|e| RingError::Populate(ring_size, e))?;
        let slots = bufs
            .into_iter()
            .enumerate()
            .map(|(i, h)| Descriptor {
                dd: AtomicBool::new(false),
                buf: AtomicU32::new(h.0),
                fills: AtomicU64::new(0),
                grants: AtomicU64::new(u64::from(i as u32 != tail)),
            })
            .collect();
        Ok(Self {
            slots,
            mask,
            pool,
            head: CachePadded::new(AtomicU32::new(start)),
            tail_register: CachePadded::new(AtomicU32::new(tail)),
            dropped: AtomicU64::new(0),
            installed: AtomicU64::new(0),
            released: AtomicU64::new(0),
            violations: AtomicU64::new(0),
            ownership_violations: AtomicU64::new(0),
            tail_writing: AtomicBool::new(false),
            tail_trace: None,
        })
    }

    /// Records the unwrapped release total after every accepted tail write.
    pub fn with_tail_trace(mut self) -> Self {
        self.tail_trace = Some(Mutex::new(Vec::new()));
        self
    }

    #[inline]
    pub fn size(&self) -> u32 {
        self.mask + 1
    }

    #[inline]
    pub fn mask(&self) -> u32 {
        self.mask
    }

    pub fn pool(&self) -> &Arc<Mempool> {
        &self.pool
    }

    #[inline]
    pub fn descriptor(&self, slot: u32) -> &Descriptor {
        &self.slots[(slot & self.mask) as usize]
    }

    /// Descriptors the NIC may still fill before it sees the ring as full.
    pub fn free_slots(&self) -> u32 {
        let head = self.head.load(Ordering::Relaxed);
        let tail = self.tail_register.load(Ordering::Acquire);
        tail.wrapping_sub(head) & self.mask
    }

    /// NIC actor: installs each packet at `head` or drops it if the ring is
    /// full. Returns the number installed. Must only be called from one
    /// thread at a time.
    pub fn fill<I: IntoIterator<Item = Packet>>(&self, packets: I) -> usize {
        packets.into_iter().filter(|p| self.fill_one(p)).count()
    }

    /// Single-packet form of [`fill`](Self::fill); `false` means dropped.
    pub fn fill_one(&self, packet: &Packet) -> bool {
        let head = self.head.load(Ordering::Relaxed);
        let tail = self.tail_register.load(Ordering::Acquire);
        if head == tail {
            self.dropped.fetch_add(1, Ordering::Relaxed);
            return false;
        }
        let desc = &self.slots[head as usize];
        let fills = desc.fills.load(Ordering::Relaxed);
        if desc.dd.load(Ordering::Acquire) || fills >= desc.grants.load(Ordering::Acquire) {
            // Software still owns this slot; a real NIC would corrupt it.
            self.ownership_violations.fetch_add(1, Ordering::Relaxed);
            self.dropped.fetch_add(1, Ordering::Relaxed);
            return false;
        }
        match desc.buffer() {
            Some(h) => self.pool.write(h, packet),
            None => {
                self.ownership_violations.fetch_add(1, Ordering::Relaxed);
                self.dropped.fetch_add(1, Ordering::Relaxed);
                return false;
            }
        }
        desc.fills.store(fills + 1, Ordering::Relaxed);
        desc.dd.store(true, Ordering::Release);
        self.head.store((head + 1) & self.mask, Ordering::Release);
        self.installed.fetch_add(1, Ordering::Relaxed);
        true
    }

    /// Emulated TAIL register write. Accepts only a contiguous forward
    /// release of consumed descriptors holding fresh buffers; `new_tail`
    /// equal to the current tail is a no-op.
    pub fn observe_tail_write(&self, new_tail: u32) -> Result<(), TransparencyViolation> {
        let new_tail = new_tail & self.mask;
        if self.tail_writing.swap(true, Ordering::Acquire) {
            let old = self.tail_register.load(Ordering::Acquire);
            return Err(self.violation(old, new_tail, new_tail, ViolationKind::ConcurrentWrite));
        }
        let old = self.tail_register.load(Ordering::Relaxed);
        let count = new_tail.wrapping_sub(old) & self.mask;
        let result = (1..=count).map(|k| (old + k) & self.mask).find_map(|slot| {
            let d = &self.slots[slot as usize];
            let kind = if d.dd.load(Ordering::Acquire) {
                Some(ViolationKind::DdStillSet)
            } else if d.buffer().is_none() {
                Some(ViolationKind::NoReplacement)
            } else if d.fills.load(Ordering::Acquire) != d.grants.load(Ordering::Relaxed) {
                Some(ViolationKind::NotConsumed)
            } else {
                None
            };
            kind.map(|k| (slot, k))
        });
        let out = match result {
            Some((slot, kind)) => Err(self.violation(old, new_tail, slot, kind)),
            None => {
                if count > 0 {
                    for k in 0..count {
                        self.slots[((old + k) & self.mask) as usize]
                            .grants
                            .fetch_add(1, Ordering::Release);
                    }
                    let total = self.released.fetch_add(u64::from(count), Ordering::Relaxed) + u64::from(count);
                    if let Some(trace) = &self.tail_trace {
                        trace.lock().unwrap().push(total);
                    }
                    self.tail_register.store(new_tail, Ordering::Release);
                }
                Ok(())
            }
        };
        self.tail_writing.store(false, Ordering::Release);
        out
    }

    fn violation(&self, old_tail: u32, new_tail: u32, slot: u32, kind: ViolationKind) -> TransparencyViolation {
        self.violations.fetch_add(1, Ordering::Relaxed);
        TransparencyViolation {
            old_tail,
            new_tail,
            slot,
            kind,
        }
    }

    pub fn snapshot(&self) -> RingSnapshot {
        RingSnapshot {
            head: self.head.load(Ordering::Acquire),
            tail_register: self.tail_register.load(Ordering::Acquire),
            dropped_count: self.dropped.load(Ordering::Acquire),
        }
    }

    pub fn transparency_violations(&self) -> u64 {
        self.violations.load(Ordering::Acquire)
    }

    /// Fills attempted on software-owned slots. Always zero for a NIC that
    /// honours the tail register.
    pub fn ownership_violations(&self) -> u64 {
        self.ownership_violations.load(Ordering::Acquire)
    }

    pub fn installed_count(&self) -> u64 {
        self.installed.load(Ordering::Acquire)
    }

    /// Total descriptors handed back through accepted tail writes.
    pub fn released_count(&self) -> u64 {
        self.released.load(Ordering::Acquire)
    }

    pub fn tail_trace(&self) -> Option<Vec<u64>> {
        self.tail_trace.as_ref().map(|t| t.lock().unwrap().clone())
    }

    /// Packets sitting in DD-set slots, in slot order starting after the tail.
    /// Only meaningful once every consumer has stopped.
    pub fn pending_packets(&self) -> Vec<Packet> {
        let tail = self.tail_register.load(Ordering::Acquire);
        (1..=self.size())
            .map(|k| &self.slots[((tail + k) & self.mask) as usize])
            .filter(|d| d.is_done())
            .filter_map(|d| d.buffer().map(|h| self.pool.read(h)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring(size: u32) -> NicRing {
        NicRing::new(size, Arc::new(Mempool::new(size as usize * 4))).unwrap()
    }

    fn pkts(range: std::ops::Range<u64>) -> Vec<Packet> {
        range.map(|s| Packet::new(s, 0, 64, s)).collect()
    }

    /// Consumes slots `(tail, upto]` the way a single driver would.
    fn consume(r: &NicRing, upto: u32) {
        let tail = r.snapshot().tail_register;
        let n = upto.wrapping_sub(tail) & r.mask();
        for k in 1..=n {
            let d = r.descriptor(tail + k);
            let fresh = r.pool().alloc().unwrap();
            let old = d.replace(fresh);
            r.pool().free(old).unwrap();
        }
    }

    /// Independent count of NIC-owned descriptors.
    fn free_by_walk(r: &NicRing) -> u32 {
        let s = r.snapshot();
        let mut n = 0;
        let mut i = s.head;
        while i != s.tail_register {
            n += 1;
            i = (i + 1) & r.mask();
        }
        n
    }

    #[test]
    fn rejects_non_power_of_two() {
        let pool = Arc::new(Mempool::new(64));
        assert_eq!(NicRing::new(12, pool).unwrap_err(), RingError::NotPowerOfTwo(12));
    }

    #[test]
    fn fresh_ring_snapshot() {
        let r = ring(16);
        assert_eq!(
            r.snapshot(),
            RingSnapshot {
                head: 0,
                tail_register: 15,
                dropped_count: 0
            }
        );
    }

    #[test]
    fn fill_on_empty_ring() {
        let r = ring(16);
        assert_eq!(r.fill(pkts(0..3)), 3);
        assert_eq!(r.snapshot().head, 3);
        let r = ring(16);
        r.fill(pkts(0..5));
        assert_eq!(r.snapshot().head, 5);
        assert!(r.descriptor(4).is_done());
        assert!(!r.descriptor(5).is_done());
    }

    #[test]
    fn full_ring_drops() {
        let r = ring(8);
        assert_eq!(r.fill(pkts(0..7)), 7);
        let s = r.snapshot();
        assert_eq!(s.head, s.tail_register);
        assert_eq!(r.fill(pkts(7..8)), 0);
        assert_eq!(r.snapshot().dropped_count, 1);
    }

    #[test]
    fn partial_fill_matches_walk() {
        let r = ring(8);
        r.fill(pkts(0..5));
        let free = free_by_walk(&r);
        assert_eq!(free, 2);
        assert_eq!(r.free_slots(), free);
        assert_eq!(r.fill(pkts(5..10)), 2);
        assert_eq!(r.snapshot().dropped_count, 3);
    }

    #[test]
    fn contiguous_release_accepted() {
        let r = ring(8);
        r.fill(pkts(0..4));
        consume(&r, 0);
        r.observe_tail_write(0).unwrap();
        consume(&r, 3);
        r.observe_tail_write(3).unwrap();
        assert_eq!(r.snapshot().tail_register, 3);
        assert_eq!(r.released_count(), 4);
        assert_eq!(r.transparency_violations(), 0);
    }

    #[test]
    fn gap_release_rejected() {
        let r = ring(8);
        r.fill(pkts(0..4));
        consume(&r, 0);
        r.observe_tail_write(0).unwrap();
        // slot 2 consumed, slot 1 still pending
        let d = r.descriptor(2);
        let old = d.replace(r.pool().alloc().unwrap());
        r.pool().free(old).unwrap();
        let err = r.observe_tail_write(2).unwrap_err();
        assert_eq!(err.slot, 1);
        assert_eq!(err.kind, ViolationKind::DdStillSet);
        assert_eq!(r.snapshot().tail_register, 0);
        assert_eq!(r.transparency_violations(), 1);
    }

    #[test]
    fn release_past_head_rejected() {
        let r = ring(8);
        r.fill(pkts(0..2));
        consume(&r, 1);
        let err = r.observe_tail_write(3).unwrap_err();
        assert_eq!(err.slot, 2);
        assert_eq!(err.kind, ViolationKind::NotConsumed);
    }

    #[test]
    fn same_tail_is_noop() {
        let r = ring(8);
        r.observe_tail_write(7).unwrap();
        assert_eq!(r.snapshot().tail_register, 7);
        assert_eq!(r.released_count(), 0);
    }

    #[test]
    fn released_slots_get_refilled_wrapping() {
        let r = ring(4).with_tail_trace();
        for round in 0..5u64 {
            let base = round * 3;
            assert_eq!(r.fill(pkts(base..base + 3)), 3);
            let upto = r.snapshot().head.wrapping_sub(1) & r.mask();
            consume(&r, upto);
            r.observe_tail_write(upto).unwrap();
        }
        assert_eq!(r.ownership_violations(), 0);
        assert_eq!(r.released_count(), 15);
        let trace = r.tail_trace().unwrap();
        assert!(trace.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn published_packet_is_readable() {
        let r = ring(8);
        let p = Packet::new(42, 3, 512, 1000);
        r.fill([p]);
        let d = r.descriptor(0);
        assert!(d.is_done());
        assert_eq!(r.pool().read(d.buffer().unwrap()), p);
        assert_eq!(d.generation(), 1);
        assert_eq!(r.pending_packets(), vec![p]);
    }
}
