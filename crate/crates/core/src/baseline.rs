//! Classic single-consumer receive and the RSS-style scale-out topology it
//! is normally deployed in: N rings, one thread per ring, flows hashed
//! across rings.

use std::sync::Arc;

use crate::mempool::{BufHandle, Mempool};
use crate::ring::{NicRing, Packet, RingError};
use crate::rx::RxError;

/// One ring driven by exactly one thread.
#[derive(Debug)]
pub struct SingleQueue {
    ring: Arc<NicRing>,
    rx_index: u32,
    batch_size: u32,
}

impl SingleQueue {
    pub fn new(ring: Arc<NicRing>, batch_size: u32) -> Self {
        // first slot after the software-held one
        let rx_index = (ring.snapshot().tail_register + 1) & ring.mask();
        Self {
            ring,
            rx_index,
            batch_size,
        }
    }

    pub fn ring(&self) -> &Arc<NicRing> {
        &self.ring
    }

    /// Scans for up to `batch_size` filled descriptors, replacing each with a
    /// buffer from the pool, then writes the tail register to the last slot
    /// processed. Stops early if the pool runs dry.
    pub fn rx_batch_single(&mut self, out: &mut Vec<BufHandle>) -> Result<usize, RxError> {
        let mask = self.ring.mask();
        let mut last = None;
        let mut n = 0;
        while n < self.batch_size {
            let desc = self.ring.descriptor(self.rx_index);
            if !desc.is_done() {
                break;
            }
            let fresh = match self.ring.pool().alloc() {
                Ok(h) => h,
                Err(e) if n == 0 => return Err(e.into()),
                Err(_) => break,
            };
            out.push(desc.replace(fresh));
            last = Some(self.rx_index);
            self.rx_index = (self.rx_index + 1) & mask;
            n += 1;
        }
        if let Some(last) = last {
            self.ring.observe_tail_write(last)?;
        }
        Ok(n as usize)
    }
}

const FLOW_HASH_MUL: u64 = 0x9E37_79B9_7F4A_7C15;

/// Multiplicative flow hash reduced to `[0, n)`.
#[inline]
pub fn dispatch_index(flow_id: u32, n: usize) -> usize {
    let h = u64::from(flow_id).wrapping_add(1).wrapping_mul(FLOW_HASH_MUL);
    ((u128::from(h) * n as u128) >> 64) as usize
}

/// N independent rings sharing one buffer pool.
#[derive(Debug)]
pub struct ScaleOutTopology {
    rings: Vec<Arc<NicRing>>,
}

impl ScaleOutTopology {
    pub fn new(n: usize, ring_size: u32, pool: Arc<Mempool>) -> Result<Self, RingError> {
        assert!(n >= 1, "scale-out needs at least one ring");
        let rings = (0..n)
            .map(|_| NicRing::new(ring_size, pool.clone()).map(Arc::new))
            .collect::<Result<_, _>>()?;
        Ok(Self { rings })
    }

    pub fn from_rings(rings: Vec<Arc<NicRing>>) -> Self {
        assert!(!rings.is_empty());
        Self { rings }
    }

    pub fn len(&self) -> usize {
        self.rings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rings.is_empty()
    }

    pub fn rings(&self) -> &[Arc<NicRing>] {
        &self.rings
    }

    pub fn dispatch(&self, packet: &Packet) -> usize {
        dispatch_index(packet.flow_id, self.rings.len())
    }

    /// NIC side: hashes the packet to a ring and fills it there.
    pub fn fill_one(&self, packet: &Packet) -> bool {
        self.rings[self.dispatch(packet)].fill_one(packet)
    }

    pub fn queues(&self, batch_size: u32) -> Vec<SingleQueue> {
        self.rings
            .iter()
            .map(|r| SingleQueue::new(r.clone(), batch_size))
            .collect()
    }
}
