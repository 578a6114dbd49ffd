//! Pre-allocated packet buffer pool.
//!
//! Buffers are addressed by [`BufHandle`] and carry the packet metadata the
//! emulated NIC "DMAs" into them. Allocation is all-or-nothing: a caller
//! either gets every buffer it asked for or none of them.
//!
//! The free list is a bounded lock-free queue; a separate `available`
//! counter is decremented *before* popping so that a bulk request which
//! cannot be fully satisfied fails without touching the queue.

use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};

use crossbeam_queue::ArrayQueue;
use thiserror::Error;

use crate::ring::Packet;

/// Sequence number stored in a buffer that has never carried a packet.
pub const EMPTY_SEQ: u64 = u64::MAX;

/// Index of a buffer inside a [`Mempool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BufHandle(pub u32);

impl BufHandle {
    pub(crate) const NONE: u32 = u32::MAX;

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolError {
    #[error("pool exhausted: requested {requested}, {available} free")]
    Exhausted { requested: usize, available: usize },
    #[error("buffer {0:?} freed while not allocated")]
    DoubleFree(BufHandle),
    #[error("buffer {0:?} does not belong to this pool")]
    UnknownHandle(BufHandle),
}

/// Packet storage behind one handle. Fields are written by the NIC emulator
/// before it publishes the descriptor's DD flag, so relaxed accesses suffice.
#[derive(Debug)]
struct PacketBuf {
    seq: AtomicU64,
    flow_id: AtomicU32,
    size_bytes: AtomicU32,
    t_inject: AtomicU64,
}

impl PacketBuf {
    fn empty() -> Self {
        Self {
            seq: AtomicU64::new(EMPTY_SEQ),
            flow_id: AtomicU32::new(0),
            size_bytes: AtomicU32::new(0),
            t_inject: AtomicU64::new(0),
        }
    }
}

#[derive(Debug)]
pub struct Mempool {
    buffers: Box<[PacketBuf]>,
    owned: Box<[AtomicBool]>,
    free: ArrayQueue<BufHandle>,
    available: AtomicUsize,
}

impl Mempool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0 && capacity < u32::MAX as usize, "invalid pool capacity");
        let free = ArrayQueue::new(capacity);
        for i in 0..capacity {
            free.push(BufHandle(i as u32)).expect("fresh queue has room");
        }
        Self {
            buffers: (0..capacity).map(|_| PacketBuf::empty()).collect(),
            owned: (0..capacity).map(|_| AtomicBool::new(false)).collect(),
            free,
            available: AtomicUsize::new(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.buffers.len()
    }

    /// Number of buffers currently free. Exact only at quiescent points.
    pub fn free_count(&self) -> usize {
        self.available.load(Ordering::Acquire)
    }

    pub fn outstanding(&self) -> usize {
        self.capacity() - self.free_count()
    }

    pub fn alloc(&self) -> Result<BufHandle, PoolError> {
        let mut one = Vec::with_capacity(1);
        self.bulk_alloc_into(1, &mut one)?;
        Ok(one[0])
    }

    pub fn bulk_alloc(&self, n: usize) -> Result<Vec<BufHandle>, PoolError> {
        let mut out = Vec::with_capacity(n);
        self.bulk_alloc_into(n, &mut out)?;
        Ok(out)
    }

    /// Appends exactly `n` distinct handles to `out`, or leaves both `out`
    /// and the pool untouched and returns [`PoolError::Exhausted`].
    pub fn bulk_alloc_into(&self, n: usize, out: &mut Vec<BufHandle>) -> Result<(), PoolError> {
        if n == 0 {
            return Ok(());
        }
        self.available
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |a| a.checked_sub(n))
            .map_err(|available| PoolError::Exhausted {
                requested: n,
                available,
            })?;
        // A reservation of n guarantees n handles are already in the queue:
        // frees push before they bump `available`.
        let mut got = 0;
        while got < n {
            match self.free.pop() {
                Some(h) => {
                    let was_owned = self.owned[h.index()].swap(true, Ordering::AcqRel);
                    debug_assert!(!was_owned, "handle {h:?} handed out twice");
                    out.push(h);
                    got += 1;
                }
                None => std::hint::spin_loop(),
            }
        }
        Ok(())
    }

    /// Returns handles to the pool. Fails with [`PoolError::DoubleFree`] if
    /// any handle is not currently allocated; in that case none of the
    /// handles in this call are returned.
    pub fn bulk_free(&self, handles: &[BufHandle]) -> Result<(), PoolError> {
        for (i, &h) in handles.iter().enumerate() {
            let err = match self.owned.get(h.index()) {
                None => Some(PoolError::UnknownHandle(h)),
                Some(flag) if !flag.swap(false, Ordering::AcqRel) => Some(PoolError::DoubleFree(h)),
                Some(_) => None,
            };
            if let Some(err) = err {
                for &undo in &handles[..i] {
                    self.owned[undo.index()].store(true, Ordering::Release);
                }
                return Err(err);
            }
        }
        for &h in handles {
            self.free.push(h).expect("free list never exceeds capacity");
        }
        self.available.fetch_add(handles.len(), Ordering::AcqRel);
        Ok(())
    }

    pub fn free(&self, handle: BufHandle) -> Result<(), PoolError> {
        self.bulk_free(std::slice::from_ref(&handle))
    }

    pub fn is_allocated(&self, handle: BufHandle) -> bool {
        self.owned
            .get(handle.index())
            .is_some_and(|f| f.load(Ordering::Acquire))
    }

    /// Emulated DMA write of a packet into a buffer.
    pub(crate) fn write(&self, handle: BufHandle, packet: &Packet) {
        let b = &self.buffers[handle.index()];
        b.seq.store(packet.seq, Ordering::Relaxed);
        b.flow_id.store(packet.flow_id, Ordering::Relaxed);
        b.size_bytes.store(packet.size_bytes, Ordering::Relaxed);
        b.t_inject.store(packet.t_inject, Ordering::Relaxed);
    }

    /// Reads whatever packet metadata the buffer currently holds. Buffers are
    /// not scrubbed on free, so a buffer delivered without a NIC fill shows
    /// the last packet it carried.
    pub fn read(&self, handle: BufHandle) -> Packet {
        let b = &self.buffers[handle.index()];
        Packet {
            seq: b.seq.load(Ordering::Relaxed),
            flow_id: b.flow_id.load(Ordering::Relaxed),
            size_bytes: b.size_bytes.load(Ordering::Relaxed),
            t_inject: b.t_inject.load(Ordering::Relaxed),
            t_deliver: None,
        }
    }
}
