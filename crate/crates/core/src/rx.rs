//! Non-blocking multi-consumer receive over one shared descriptor ring.
//!
//! Any number of consumers call [`RxConsumer::rx_batch`] on the same
//! [`RxQueue`]. Each call:
//!
//! 1. loads the shared transaction ID `rx_index`;
//! 2. scans forward for up to `batch_size` descriptors with DD set;
//! 3. reserves that many replacement buffers from the pool;
//! 4. tries once to CAS `rx_index` from the loaded value to `value + n`;
//! 5. on a win, swaps each filled descriptor's buffer for a fresh one and
//!    sets the batch's bits in the `read_done` bitmask;
//! 6. win, lose or empty, makes one non-waiting attempt to move the NIC tail
//!    over the contiguous run of done bits starting at `sw_tail`.
//!
//! `rx_index` and `sw_tail` are 32-bit transaction IDs that grow without
//! bound and wrap at 2^32. The slot is `id mod ring_size` and the epoch is
//! `id / ring_size`; a consumer that loaded a value one or more full laps
//! ago can never win the CAS.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;

use crossbeam_utils::CachePadded;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hooks::{HookPoint, RxHook};
use crate::mempool::{BufHandle, PoolError};
use crate::ring::{NicRing, TransparencyViolation};

pub const DEFAULT_BATCH_SIZE: u32 = 32;
pub const DEFAULT_RING_SIZE: u32 = 1024;

const WORD_BITS: u32 = u64::BITS;

/// Ever-growing claim counter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransactionId(pub u32);

impl TransactionId {
    #[inline]
    pub fn slot(self, ring_size: u32) -> u32 {
        self.0 & (ring_size - 1)
    }

    #[inline]
    pub fn epoch(self, ring_size: u32) -> u32 {
        self.0 / ring_size
    }

    #[inline]
    pub fn advance(self, n: u32) -> Self {
        Self(self.0.wrapping_add(n))
    }

    /// Forward distance from `earlier` to `self`, modulo 2^32.
    #[inline]
    pub fn since(self, earlier: Self) -> u32 {
        self.0.wrapping_sub(earlier.0)
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("ring size {0} is not a power of two")]
pub struct NotPowerOfTwo(pub u32);

/// Maps a transaction ID to `(slot, epoch)`.
pub fn id_to_slot(id: TransactionId, ring_size: u32) -> Result<(u32, u32), NotPowerOfTwo> {
    if !ring_size.is_power_of_two() {
        return Err(NotPowerOfTwo(ring_size));
    }
    Ok((id.slot(ring_size), id.epoch(ring_size)))
}

/// `(word index, bit mask)` pairs covering `count` slots starting at
/// `first_slot`, in ascending slot order and wrapping at the ring end. Bits
/// of one word come out as a single mask.
pub fn done_masks(first_slot: u32, count: u32, ring_size: u32) -> DoneMasks {
    DoneMasks {
        slot: first_slot & (ring_size - 1),
        remaining: count.min(ring_size),
        ring_size,
    }
}

#[derive(Clone, Debug)]
pub struct DoneMasks {
    slot: u32,
    remaining: u32,
    ring_size: u32,
}

impl Iterator for DoneMasks {
    type Item = (usize, u64);

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        let bit = self.slot % WORD_BITS;
        let room = (WORD_BITS - bit).min(self.ring_size - self.slot);
        let take = room.min(self.remaining);
        let run = if take == WORD_BITS {
            u64::MAX
        } else {
            (1u64 << take) - 1
        };
        let item = ((self.slot / WORD_BITS) as usize, run << bit);
        self.slot = (self.slot + take) & (self.ring_size - 1);
        self.remaining -= take;
        Some(item)
    }
}

/// Fault-injection variants used to show what each design element guards
/// against. Never use anything but `None` outside of tests.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    #[default]
    None,
    /// CAS on the wrapped slot index instead of the epoch-bearing ID.
    RawSlotClaimKey,
    /// Release up to the furthest done bit, ignoring gaps.
    NonContiguousRelease,
}

#[derive(Clone)]
pub struct RxConfig {
    pub batch_size: u32,
    pub mutation: Mutation,
    pub hook: Option<Arc<dyn RxHook>>,
    /// Keep a per-consumer log of won claims.
    pub trace_claims: bool,
    /// Initial value of `rx_index` and `sw_tail`. Must map to the ring's
    /// starting head slot.
    pub initial_id: TransactionId,
}

impl Default for RxConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            mutation: Mutation::None,
            hook: None,
            trace_claims: false,
            initial_id: TransactionId(0),
        }
    }
}

impl std::fmt::Debug for RxConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RxConfig")
            .field("batch_size", &self.batch_size)
            .field("mutation", &self.mutation)
            .field("hook", &self.hook.is_some())
            .field("trace_claims", &self.trace_claims)
            .field("initial_id", &self.initial_id)
            .finish()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RxError {
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Transparency(#[from] TransparencyViolation),
}

/// A won claim: IDs `[first_id, first_id + count)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Claim {
    pub first_id: TransactionId,
    pub count: u32,
}

/// Shared state of one concurrently consumed receive queue.
pub struct RxQueue {
    ring: Arc<NicRing>,
    rx_index: CachePadded<AtomicU32>,
    sw_tail: CachePadded<AtomicU32>,
    release_flag: CachePadded<AtomicBool>,
    read_done: Box<[AtomicU64]>,
    enabled: AtomicBool,
    cas_failures: AtomicU64,
    config: RxConfig,
}

impl std::fmt::Debug for RxQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RxQueue")
            .field("rx_index", &self.rx_index())
            .field("sw_tail", &self.sw_tail())
            .field("enabled", &self.is_enabled())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl RxQueue {
    pub fn new(ring: Arc<NicRing>, config: RxConfig) -> Self {
        let words = ring.size().div_ceil(WORD_BITS) as usize;
        assert!(
            config.batch_size >= 1 && config.batch_size <= ring.size(),
            "batch size must be in 1..=ring_size"
        );
        let start = match config.mutation {
            Mutation::RawSlotClaimKey => config.initial_id.slot(ring.size()),
            _ => config.initial_id.0,
        };
        Self {
            rx_index: CachePadded::new(AtomicU32::new(start)),
            sw_tail: CachePadded::new(AtomicU32::new(config.initial_id.0)),
            release_flag: CachePadded::new(AtomicBool::new(false)),
            read_done: (0..words).map(|_| AtomicU64::new(0)).collect(),
            enabled: AtomicBool::new(true),
            cas_failures: AtomicU64::new(0),
            ring,
            config,
        }
    }

    pub fn ring(&self) -> &Arc<NicRing> {
        &self.ring
    }

    pub fn config(&self) -> &RxConfig {
        &self.config
    }

    pub fn consumer(&self, id: usize) -> RxConsumer<'_> {
        RxConsumer {
            queue: self,
            id,
            fresh: Vec::with_capacity(self.config.batch_size as usize),
            claims: self.config.trace_claims.then(Vec::new),
        }
    }

    /// Next unclaimed transaction ID.
    pub fn rx_index(&self) -> TransactionId {
        TransactionId(self.rx_index.load(Ordering::Acquire))
    }

    /// Next transaction ID to be handed back to the NIC.
    pub fn sw_tail(&self) -> TransactionId {
        TransactionId(self.sw_tail.load(Ordering::Acquire))
    }

    pub fn cas_failures(&self) -> u64 {
        self.cas_failures.load(Ordering::Relaxed)
    }

    /// When off, only consumer 0 receives; every other consumer returns 0
    /// without touching shared state.
    pub fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Release);
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled.load(Ordering::Acquire)
    }

    /// True when no completion bit is set.
    pub fn read_done_is_clear(&self) -> bool {
        self.read_done.iter().all(|w| w.load(Ordering::Acquire) == 0)
    }

    #[inline]
    fn ring_size(&self) -> u32 {
        self.ring.size()
    }

    #[inline]
    fn hook(&self, consumer: usize, point: HookPoint) {
        if let Some(h) = &self.config.hook {
            h.on(consumer, point);
        }
    }

    /// Sets the completion bits for IDs `[first_id, first_id + count)`, one
    /// fetch-or per bitmask word touched, lowest word first.
    pub fn mark_done(&self, first_id: TransactionId, count: u32) {
        for (word, mask) in done_masks(first_id.slot(self.ring_size()), count, self.ring_size()) {
            self.read_done[word].fetch_or(mask, Ordering::AcqRel);
        }
    }

    /// Length of the run of set bits starting at `slot`, capped at `limit`.
    fn contiguous_done(&self, slot: u32, limit: u32) -> u32 {
        let size = self.ring_size();
        let mut slot = slot;
        let mut total = 0;
        while total < limit {
            let bit = slot % WORD_BITS;
            let room = (WORD_BITS - bit).min(size - slot);
            let word = self.read_done[(slot / WORD_BITS) as usize].load(Ordering::Acquire) >> bit;
            let run = word.trailing_ones().min(room);
            total += run;
            if run < room {
                break;
            }
            slot = (slot + room) & (size - 1);
        }
        total.min(limit)
    }

    /// Distance to one past the furthest set bit within `limit` slots.
    fn span_to_last_done(&self, slot: u32, limit: u32) -> u32 {
        (0..limit)
            .filter(|k| {
                let s = (slot + k) & (self.ring_size() - 1);
                self.read_done[(s / WORD_BITS) as usize].load(Ordering::Acquire) >> (s % WORD_BITS) & 1 == 1
            })
            .last()
            .map_or(0, |k| k + 1)
    }

    /// One bounded, non-waiting pass of tail release. Returns 0 immediately
    /// when another consumer holds the release flag.
    pub fn try_release(&self) -> Result<u32, TransparencyViolation> {
        if self
            .release_flag
            .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
            .is_err()
        {
            return Ok(0);
        }
        let tail = TransactionId(self.sw_tail.load(Ordering::Relaxed));
        let size = self.ring_size();
        let start = tail.slot(size);
        let n = match self.config.mutation {
            Mutation::NonContiguousRelease => self.span_to_last_done(start, size - 1),
            _ => self.contiguous_done(start, size - 1),
        };
        let result = if n == 0 {
            Ok(0)
        } else {
            for (word, mask) in done_masks(start, n, size) {
                self.read_done[word].fetch_and(!mask, Ordering::AcqRel);
            }
            let new_tail = tail.advance(n);
            self.sw_tail.store(new_tail.0, Ordering::Release);
            self.ring
                .observe_tail_write(new_tail.advance(u32::MAX).slot(size))
                .map(|()| n)
        };
        self.release_flag.store(false, Ordering::Release);
        result
    }

    #[cfg(test)]
    fn hold_release_flag(&self) -> bool {
        self.release_flag
            .compare_exchange(false, true, Ordering::Acquire, Ordering::Relaxed)
            .is_ok()
    }

    #[cfg(test)]
    fn drop_release_flag(&self) {
        self.release_flag.store(false, Ordering::Release);
    }
}

/// Per-thread handle onto an [`RxQueue`].
pub struct RxConsumer<'q> {
    queue: &'q RxQueue,
    id: usize,
    fresh: Vec<BufHandle>,
    claims: Option<Vec<Claim>>,
}

impl<'q> RxConsumer<'q> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn queue(&self) -> &'q RxQueue {
        self.queue
    }

    /// Claims taken by this consumer, when claim tracing is on.
    pub fn claims(&self) -> &[Claim] {
        self.claims.as_deref().unwrap_or(&[])
    }

    pub fn take_claims(&mut self) -> Vec<Claim> {
        self.claims.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Receives up to `batch_size` packets, appending their buffers to `out`.
    ///
    /// Returns the number delivered to this caller: 0 when the ring is empty
    /// or another consumer won the race. Buffers appended to `out` belong to
    /// the caller even if an error is returned afterwards.
    pub fn rx_batch(&mut self, out: &mut Vec<BufHandle>) -> Result<usize, RxError> {
        let q = self.queue;
        if self.id != 0 && !q.is_enabled() {
            return Ok(0);
        }
        let size = q.ring_size();
        let ring = &*q.ring;
        let loaded = TransactionId(q.rx_index.load(Ordering::SeqCst));

        let mut found = 0;
        while found < q.config.batch_size && ring.descriptor(loaded.advance(found).slot(size)).is_done() {
            found += 1;
        }

        let mut delivered = 0;
        if found > 0 {
            self.fresh.clear();
            if let Err(e) = ring.pool().bulk_alloc_into(found as usize, &mut self.fresh) {
                q.try_release()?;
                return Err(e.into());
            }
            q.hook(self.id, HookPoint::BeforeClaim);
            let target = match q.config.mutation {
                Mutation::RawSlotClaimKey => loaded.advance(found).slot(size),
                _ => loaded.advance(found).0,
            };
            if q.rx_index
                .compare_exchange(loaded.0, target, Ordering::SeqCst, Ordering::SeqCst)
                .is_ok()
            {
                q.hook(self.id, HookPoint::AfterClaim);
                for (j, &fresh) in self.fresh.iter().enumerate() {
                    let desc = ring.descriptor(loaded.advance(j as u32).slot(size));
                    out.push(desc.replace(fresh));
                }
                q.hook(self.id, HookPoint::AfterCopy);
                q.mark_done(loaded, found);
                if let Some(c) = &mut self.claims {
                    c.push(Claim {
                        first_id: loaded,
                        count: found,
                    });
                }
                delivered = found as usize;
            } else {
                q.cas_failures.fetch_add(1, Ordering::Relaxed);
                ring.pool().bulk_free(&self.fresh)?;
            }
            self.fresh.clear();
        }
        q.try_release()?;
        Ok(delivered)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mempool::Mempool;
    use crate::ring::Packet;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn setup(size: u32, cfg: RxConfig) -> RxQueue {
        let pool = Arc::new(Mempool::new(size as usize * 4));
        let start = cfg.initial_id.slot(size);
        let ring = Arc::new(NicRing::with_start(size, pool, start).unwrap());
        RxQueue::new(ring, cfg)
    }

    fn pkts(range: std::ops::Range<u64>) -> Vec<Packet> {
        range.map(|s| Packet::new(s, 0, 64, 0)).collect()
    }

    fn seqs(q: &RxQueue, bufs: &[BufHandle]) -> Vec<u64> {
        bufs.iter().map(|&h| q.ring().pool().read(h).seq).collect()
    }

    /// Per-bit oracle: bit set for every slot in the range, grouped by word.
    fn masks_by_bits(first: u32, count: u32, size: u32) -> BTreeMap<usize, u64> {
        let mut m = BTreeMap::new();
        for k in 0..count.min(size) {
            let s = (first + k) % size;
            *m.entry((s / 64) as usize).or_insert(0u64) |= 1u64 << (s % 64);
        }
        m
    }

    #[test]
    fn id_mapping_table() {
        assert_eq!(id_to_slot(TransactionId(0), 1024), Ok((0, 0)));
        assert_eq!(id_to_slot(TransactionId(1023), 1024), Ok((1023, 0)));
        assert_eq!(id_to_slot(TransactionId(1024), 1024), Ok((0, 1)));
        assert_eq!(id_to_slot(TransactionId(1025), 1024), Ok((1, 1)));
        assert_eq!(id_to_slot(TransactionId(2047), 1024), Ok((1023, 1)));
        assert_eq!(id_to_slot(TransactionId(2048), 1024), Ok((0, 2)));
        assert_eq!(id_to_slot(TransactionId(3071), 1024), Ok((1023, 2)));
        assert_eq!(id_to_slot(TransactionId(5), 1000), Err(NotPowerOfTwo(1000)));
    }

    #[test]
    fn epoch_wraps_with_id() {
        let last = TransactionId(u32::MAX);
        assert_eq!(id_to_slot(last, 1024), Ok((1023, (1 << 22) - 1)));
        assert_eq!(id_to_slot(last.advance(1), 1024), Ok((0, 0)));
    }

    #[test]
    fn done_masks_examples() {
        assert_eq!(done_masks(0, 3, 1024).collect::<Vec<_>>(), vec![(0, 0b111)]);
        assert_eq!(
            done_masks(62, 4, 1024).collect::<Vec<_>>(),
            vec![(0, 0b11 << 62), (1, 0b11)]
        );
        assert_eq!(
            done_masks(32, 32, 1024).collect::<Vec<_>>(),
            vec![(0, 0xFFFF_FFFF << 32)]
        );
        // wraps at the ring end
        assert_eq!(
            done_masks(1022, 3, 1024).collect::<Vec<_>>(),
            vec![(15, 0b11 << 62), (0, 1)]
        );
        assert_eq!(done_masks(3, 2, 4).collect::<Vec<_>>(), vec![(0, 0b1000), (0, 0b1)]);
    }

    proptest! {
        #[test]
        fn done_masks_cover_exactly(first in 0u32..1024, count in 0u32..=64, log in 2u32..=10) {
            let size = 1u32 << log;
            let first = first % size;
            let mut got: BTreeMap<usize, u64> = BTreeMap::new();
            for (w, m) in done_masks(first, count, size) {
                prop_assert_eq!(*got.get(&w).unwrap_or(&0) & m, 0, "overlapping masks");
                *got.entry(w).or_insert(0) |= m;
            }
            prop_assert_eq!(got, masks_by_bits(first, count, size));
        }
    }

    #[test]
    fn empty_ring_issues_no_cas() {
        let q = setup(64, RxConfig::default());
        let mut out = Vec::new();
        assert_eq!(q.consumer(0).rx_batch(&mut out).unwrap(), 0);
        assert_eq!(q.rx_index(), TransactionId(0));
        assert_eq!(q.cas_failures(), 0);
        assert_eq!(q.ring().snapshot().tail_register, 63);
    }

    #[test]
    fn single_thread_batch_round_trip() {
        let q = setup(1024, RxConfig::default());
        q.ring().fill(pkts(0..5));
        let mut out = Vec::new();
        assert_eq!(q.consumer(0).rx_batch(&mut out).unwrap(), 5);
        assert_eq!(seqs(&q, &out), vec![0, 1, 2, 3, 4]);
        assert_eq!(q.rx_index(), TransactionId(5));
        assert_eq!(q.sw_tail(), TransactionId(5));
        assert!(q.read_done_is_clear());
        // 1023 -> 4: advanced by 5
        assert_eq!(q.ring().snapshot().tail_register, 4);
        assert_eq!(q.ring().released_count(), 5);
    }

    #[test]
    fn batch_size_caps_claim() {
        let q = setup(64, RxConfig::default());
        q.ring().fill(pkts(0..40));
        let mut c = q.consumer(0);
        let mut out = Vec::new();
        assert_eq!(c.rx_batch(&mut out).unwrap(), 32);
        assert_eq!(c.rx_batch(&mut out).unwrap(), 8);
        assert_eq!(seqs(&q, &out), (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn mark_done_sets_bits() {
        let q = setup(1024, RxConfig::default());
        q.mark_done(TransactionId(0), 3);
        assert_eq!(q.read_done[0].load(Ordering::Relaxed), 0b111);
        q.mark_done(TransactionId(62), 4);
        assert_eq!(q.read_done[0].load(Ordering::Relaxed), 0b111 | 0b11 << 62);
        assert_eq!(q.read_done[1].load(Ordering::Relaxed), 0b11);
    }

    /// Drives the descriptors of IDs `ids` through copy-and-replace without
    /// touching rx_index, as a consumer that won those IDs would.
    fn consume_ids(q: &RxQueue, ids: std::ops::Range<u32>) {
        for id in ids {
            let d = q.ring().descriptor(TransactionId(id).slot(q.ring().size()));
            let old = d.replace(q.ring().pool().alloc().unwrap());
            q.ring().pool().free(old).unwrap();
        }
    }

    #[test]
    fn try_release_contiguous_prefix() {
        let q = setup(1024, RxConfig::default());
        q.ring().fill(pkts(0..3));
        q.rx_index.store(3, Ordering::Relaxed);
        consume_ids(&q, 0..3);
        q.mark_done(TransactionId(0), 3);
        assert_eq!(q.try_release().unwrap(), 3);
        assert!(q.read_done_is_clear());
        assert_eq!(q.sw_tail(), TransactionId(3));
        // tail register names the last released slot
        assert_eq!(q.ring().snapshot().tail_register, 2);
    }

    #[test]
    fn try_release_stops_at_gap() {
        let q = setup(1024, RxConfig::default());
        q.ring().fill(pkts(0..3));
        q.rx_index.store(3, Ordering::Relaxed);
        consume_ids(&q, 0..1);
        q.mark_done(TransactionId(0), 1);
        assert_eq!(q.try_release().unwrap(), 1);
        assert_eq!(q.sw_tail(), TransactionId(1));
        // ID 2 done, ID 1 still pending
        consume_ids(&q, 2..3);
        q.mark_done(TransactionId(2), 1);
        assert_eq!(q.try_release().unwrap(), 0);
        assert_eq!(q.sw_tail(), TransactionId(1));
        assert_eq!(q.ring().snapshot().tail_register, 0);
        consume_ids(&q, 1..2);
        q.mark_done(TransactionId(1), 1);
        assert_eq!(q.try_release().unwrap(), 2);
        assert_eq!(q.ring().snapshot().tail_register, 2);
    }

    #[test]
    fn try_release_when_flag_held() {
        let q = setup(64, RxConfig::default());
        q.ring().fill(pkts(0..2));
        q.rx_index.store(2, Ordering::Relaxed);
        consume_ids(&q, 0..2);
        q.mark_done(TransactionId(0), 2);
        assert!(q.hold_release_flag());
        assert_eq!(q.try_release().unwrap(), 0);
        assert_eq!(q.sw_tail(), TransactionId(0));
        assert!(!q.read_done_is_clear());
        q.drop_release_flag();
        assert_eq!(q.try_release().unwrap(), 2);
    }

    #[test]
    fn claims_survive_id_wraparound() {
        let start = TransactionId(u32::MAX - 1);
        let cfg = RxConfig {
            initial_id: start,
            trace_claims: true,
            batch_size: 2,
            ..RxConfig::default()
        };
        let q = setup(1024, cfg);
        assert_eq!(q.ring().snapshot().head, 1022);
        q.ring().fill(pkts(0..4));
        let mut c = q.consumer(0);
        let mut out = Vec::new();
        // 64-bit shadow of the counter
        let mut shadow = u64::from(start.0);
        while c.rx_batch(&mut out).unwrap() > 0 {
            let last = c.claims().last().unwrap();
            assert_eq!(u64::from(last.first_id.0), shadow & 0xFFFF_FFFF);
            for k in 0..last.count {
                let id = shadow + u64::from(k);
                assert_eq!(last.first_id.advance(k).slot(1024) as u64, id % 1024);
            }
            shadow += u64::from(last.count);
        }
        assert_eq!(seqs(&q, &out), vec![0, 1, 2, 3]);
        assert_eq!(shadow, u64::from(u32::MAX - 1) + 4);
        assert_eq!(q.rx_index(), TransactionId(2));
        assert_eq!(q.sw_tail(), TransactionId(2));
        assert_eq!(q.ring().snapshot().tail_register, 1);
        assert_eq!(q.ring().transparency_violations(), 0);
    }

    #[test]
    fn disabled_queue_serves_consumer_zero_only() {
        let q = setup(64, RxConfig::default());
        q.ring().fill(pkts(0..8));
        q.set_enabled(false);
        let mut out = Vec::new();
        for id in 1..4 {
            assert_eq!(q.consumer(id).rx_batch(&mut out).unwrap(), 0);
        }
        assert_eq!(q.rx_index(), TransactionId(0));
        assert_eq!(q.consumer(0).rx_batch(&mut out).unwrap(), 8);
        q.ring().fill(pkts(8..10));
        q.set_enabled(true);
        assert_eq!(q.consumer(3).rx_batch(&mut out).unwrap(), 2);
    }

    #[test]
    fn stale_load_loses_race() {
        // Two consumers observe the same rx_index; the second CAS must fail.
        let q = setup(64, RxConfig::default());
        q.ring().fill(pkts(0..8));
        let loaded = q.rx_index.load(Ordering::SeqCst);
        let mut a = q.consumer(0);
        let mut out = Vec::new();
        assert_eq!(a.rx_batch(&mut out).unwrap(), 8);
        assert!(q
            .rx_index
            .compare_exchange(loaded, loaded + 8, Ordering::SeqCst, Ordering::SeqCst)
            .is_err());
    }

    #[test]
    fn pool_exhaustion_claims_nothing() {
        let pool = Arc::new(Mempool::new(64 + 8));
        let ring = Arc::new(NicRing::new(64, pool.clone()).unwrap());
        let q = RxQueue::new(ring, RxConfig::default());
        q.ring().fill(pkts(0..5));
        let hold = pool.bulk_alloc(8).unwrap();
        let mut out = Vec::new();
        assert!(matches!(q.consumer(0).rx_batch(&mut out), Err(RxError::Pool(_))));
        assert_eq!(q.rx_index(), TransactionId(0));
        pool.bulk_free(&hold).unwrap();
        assert_eq!(q.consumer(0).rx_batch(&mut out).unwrap(), 5);
    }
}
