//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use corec::{BufHandle, Mempool, NicRing, Packet, RxConfig, RxQueue, SingleQueue};

pub const RING_SIZE: u32 = 1024;

fn ring() -> Arc<NicRing> {
    let pool = Arc::new(Mempool::new(RING_SIZE as usize * 2));
    Arc::new(NicRing::new(RING_SIZE, pool).expect("power of two"))
}

pub fn corec_queue(batch_size: u32) -> RxQueue {
    RxQueue::new(
        ring(),
        RxConfig {
            batch_size,
            ..RxConfig::default()
        },
    )
}

pub fn single_queue(batch_size: u32) -> SingleQueue {
    SingleQueue::new(ring(), batch_size)
}

/// Puts `n` packets on the ring and returns how many fit.
pub fn fill(ring: &NicRing, n: u32, next_seq: &mut u64) -> usize {
    let start = *next_seq;
    *next_seq += u64::from(n);
    ring.fill((start..*next_seq).map(|s| Packet::new(s, (s % 64) as u32, 64, 0)))
}

/// Hands received buffers back to the pool.
pub fn recycle(ring: &NicRing, bufs: &mut Vec<BufHandle>) {
    ring.pool().bulk_free(bufs).expect("owned buffers");
    bufs.clear();
}

/// A delivery order with local swaps, as a multi-consumer run produces.
pub fn perturbed_order(n: usize, flows: u32, seed: u64) -> (Vec<u64>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs: Vec<u64> = (0..n as u64).collect();
    for _ in 0..n / 20 {
        let i = rng.gen_range(0..n);
        let j = (i + rng.gen_range(1..32)).min(n - 1);
        seqs.swap(i, j);
    }
    let flow_of: Vec<u32> = (0..n).map(|_| rng.gen_range(0..flows)).collect();
    (seqs, flow_of)
}

/// A fully shuffled order.
pub fn shuffled_order(n: usize, flows: u32, seed: u64) -> (Vec<u64>, Vec<u32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seqs: Vec<u64> = (0..n as u64).collect();
    seqs.shuffle(&mut rng);
    let flow_of: Vec<u32> = (0..n).map(|_| rng.gen_range(0..flows)).collect();
    (seqs, flow_of)
}
