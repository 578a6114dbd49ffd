//! Scripted interleavings. Each replay parks one consumer thread at a hook
//! point, drives the others and the NIC from the calling thread, then
//! resumes it. The order of operations is fixed, so outcomes are exact.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::config::{ArrivalProcess, ClockMode, ExperimentConfig};
use super::{finish, Delivery, RunResult, RunStats, RunTrace};
use crate::hooks::{HookPoint, RxHook, StallGate};
use crate::mempool::{BufHandle, Mempool, EMPTY_SEQ};
use crate::ring::{NicRing, Packet, TransparencyViolation};
use crate::rx::{Claim, Mutation, RxConfig, RxConsumer, RxError, RxQueue, TransactionId};

const PARK_TIMEOUT: Duration = Duration::from_secs(5);

fn queue(ring_size: u32, pool: usize, batch: u32, mutation: Mutation, gate: &Arc<StallGate>) -> RxQueue {
    let pool = Arc::new(Mempool::new(pool));
    let ring = NicRing::new(ring_size, pool)
        .expect("power-of-two ring")
        .with_tail_trace();
    let hook: Arc<dyn RxHook> = gate.clone();
    RxQueue::new(
        Arc::new(ring),
        RxConfig {
            batch_size: batch,
            mutation,
            hook: Some(hook),
            trace_claims: true,
            ..RxConfig::default()
        },
    )
}

fn packet(seq: u64) -> Packet {
    Packet::new(seq, 0, 64, seq)
}

/// Reads and frees delivered buffers.
fn drain(q: &RxQueue, bufs: &mut Vec<BufHandle>) -> Vec<Packet> {
    let pool = q.ring().pool();
    let packets = bufs.iter().map(|&h| pool.read(h)).collect();
    pool.bulk_free(bufs).expect("delivered buffers are owned");
    bufs.clear();
    packets
}

fn seqs(packets: &[Packet]) -> Vec<u64> {
    packets.iter().map(|p| p.seq).collect()
}

fn duplicates(seqs: &[u64]) -> Vec<u64> {
    let mut count: HashMap<u64, u32> = HashMap::new();
    for &s in seqs {
        *count.entry(s).or_default() += 1;
    }
    let mut d: Vec<u64> = count
        .into_iter()
        .filter(|&(s, c)| c > 1 || s == EMPTY_SEQ)
        .map(|(s, _)| s)
        .collect();
    d.sort_unstable();
    d
}

/// Packages a replay as a run so it can go through the invariant checks.
fn replay_result(
    q: &RxQueue,
    threads: usize,
    injected: Vec<u64>,
    deliveries: Vec<Delivery>,
    claims: Vec<(usize, Claim)>,
    rx_errors: Vec<String>,
) -> RunResult {
    let ring = q.ring();
    let config = ExperimentConfig {
        threads,
        ring_size: ring.size(),
        batch_size: q.config().batch_size,
        arrival: ArrivalProcess::Saturate,
        clock: ClockMode::WallClock,
        packets: injected.len() as u64,
        mutation: q.config().mutation,
        ..ExperimentConfig::default()
    };
    let trace = RunTrace {
        injected,
        pending: ring.pending_packets().iter().map(|p| p.seq).collect(),
        deliveries,
        claims,
        tail_writes: vec![ring.tail_trace().unwrap_or_default()],
        installed: vec![ring.installed_count()],
        read_done_quiescent: q.read_done_is_clear(),
        rx_errors,
        ..RunTrace::default()
    };
    let stats = RunStats {
        elapsed_ns: 0,
        transparency_violations: ring.transparency_violations(),
        ownership_violations: ring.ownership_violations(),
        timed_out: false,
    };
    finish(&config, trace, stats)
}

fn tag(consumer: usize, packets: Vec<Packet>) -> impl Iterator<Item = Delivery> {
    packets.into_iter().map(move |packet| Delivery { consumer, packet })
}

#[derive(Clone, Debug, Serialize)]
pub struct AbaReport {
    pub mutation: Mutation,
    pub ring_size: u32,
    /// Full laps the ring made while the first consumer was parked.
    pub laps: u32,
    /// Whether the parked consumer's stale CAS went through.
    pub stale_claim_won: bool,
    pub delivered: Vec<u64>,
    /// Sequence numbers seen more than once, plus never-written buffers.
    pub duplicates: Vec<u64>,
    pub cas_failures: u64,
    pub transparency_violations: u64,
    #[serde(skip)]
    pub run: RunResult,
}

/// Forced full-wrap interleaving on a 4-slot ring.
///
/// Consumer 0 scans three filled descriptors at ID 0 and parks before its
/// CAS. Consumer 1 then takes those three and keeps the ring cycling one
/// packet at a time for several laps, leaving only the descriptor at slot 0
/// filled and the shared index back on slot 0. Consumer 0 resumes and
/// attempts `CAS(0 -> 3)`.
pub fn aba_replay(mutation: Mutation) -> AbaReport {
    const RING: u32 = 4;
    const BATCH: u32 = 3;
    const LAPS: u32 = 5;
    let gate = Arc::new(StallGate::new(0, HookPoint::BeforeClaim, 1));
    let q = queue(RING, 3 * RING as usize, BATCH, mutation, &gate);
    let ring = q.ring().clone();
    let mut injected = Vec::new();
    let mut inject = |seq: u64| {
        assert!(ring.fill_one(&packet(seq)), "replay assumes the ring has room");
        injected.push(seq);
    };
    for seq in 0..u64::from(BATCH) {
        inject(seq);
    }

    let mut deliveries = Vec::new();
    let mut claims = Vec::new();
    let mut errors = Vec::new();
    let mut stale_won = false;
    thread::scope(|s| {
        let a = s.spawn(|| {
            let mut c = q.consumer(0);
            let mut bufs = Vec::new();
            let res = c.rx_batch(&mut bufs);
            (drain(&q, &mut bufs), res, c.take_claims())
        });
        assert!(gate.wait_parked(PARK_TIMEOUT), "consumer 0 never reached its CAS");

        let mut b = q.consumer(1);
        let mut bufs = Vec::new();
        b.rx_batch(&mut bufs).expect("honest consumer");
        deliveries.extend(tag(1, drain(&q, &mut bufs)));
        // one packet per round until the index is back on slot 0
        let mut seq = u64::from(BATCH);
        for _ in 0..LAPS * RING + 1 {
            inject(seq);
            seq += 1;
            b.rx_batch(&mut bufs).expect("honest consumer");
            deliveries.extend(tag(1, drain(&q, &mut bufs)));
        }
        inject(seq);

        gate.release();
        let (stale, res, a_claims) = a.join().expect("consumer 0 panicked");
        // a stale win either delivers or trips the NIC's release check
        stale_won = !stale.is_empty() || res.is_err();
        if let Err(e) = res {
            errors.push(e.to_string());
        }
        deliveries.extend(tag(0, stale));
        claims.extend(a_claims.into_iter().map(|c| (0, c)));
        // the honest consumer picks up whatever remains
        loop {
            let r = b.rx_batch(&mut bufs);
            let n = bufs.len();
            deliveries.extend(tag(1, drain(&q, &mut bufs)));
            if let Err(e) = r {
                errors.push(e.to_string());
            }
            if n == 0 {
                break;
            }
        }
        claims.extend(b.take_claims().into_iter().map(|c| (1, c)));
    });

    let delivered: Vec<u64> = deliveries.iter().map(|d| d.packet.seq).collect();
    AbaReport {
        mutation,
        ring_size: RING,
        laps: LAPS,
        stale_claim_won: stale_won,
        duplicates: duplicates(&delivered),
        delivered,
        cas_failures: q.cas_failures(),
        transparency_violations: q.ring().transparency_violations(),
        run: replay_result(&q, 2, injected, deliveries, claims, errors),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ContiguityReport {
    pub mutation: Mutation,
    /// Descriptors handed back while consumer A held slot 1.
    pub released_while_stalled: u64,
    pub tail_while_stalled: u32,
    pub sw_tail_while_stalled: TransactionId,
    /// Handed back once A resumed.
    pub released_after_resume: u64,
    pub tail_after_resume: u32,
    pub read_done_clear: bool,
    pub delivered: Vec<u64>,
    pub violation: Option<TransparencyViolation>,
    pub transparency_violations: u64,
    #[serde(skip)]
    pub run: RunResult,
}

/// Two-consumer gap: consumer A claims slot 1 and is descheduled, consumer
/// B claims and completes slot 2. Slot 0 was consumed and released first.
pub fn contiguity_replay(mutation: Mutation) -> ContiguityReport {
    let gate = Arc::new(StallGate::new(1, HookPoint::AfterClaim, 1));
    let q = queue(8, 32, 1, mutation, &gate);
    let ring = q.ring().clone();
    for s in 0..3 {
        assert!(ring.fill_one(&packet(s)));
    }
    let mut violation = None;
    let mut errors = Vec::new();
    let mut note = |r: Result<usize, RxError>| match r {
        Err(RxError::Transparency(v)) => {
            errors.push(v.to_string());
            violation.get_or_insert(v);
        }
        Err(e) => errors.push(e.to_string()),
        Ok(_) => {}
    };

    let mut bufs = Vec::new();
    let mut deliveries = Vec::new();
    let mut claims = Vec::new();
    let mut c0 = q.consumer(0);
    c0.rx_batch(&mut bufs).expect("slot 0");
    deliveries.extend(tag(0, drain(&q, &mut bufs)));
    claims.extend(c0.take_claims().into_iter().map(|c| (0, c)));

    let (stalled, tail_stalled, sw_tail_stalled, resumed) = thread::scope(|s| {
        let a = s.spawn(|| {
            let mut c = q.consumer(1);
            let mut bufs = Vec::new();
            let res = c.rx_batch(&mut bufs);
            (drain(&q, &mut bufs), res, c.take_claims())
        });
        assert!(gate.wait_parked(PARK_TIMEOUT), "consumer A never claimed");

        let before = ring.released_count();
        let mut b = q.consumer(2);
        note(b.rx_batch(&mut bufs));
        deliveries.extend(tag(2, drain(&q, &mut bufs)));
        claims.extend(b.take_claims().into_iter().map(|c| (2, c)));
        for _ in 0..3 {
            note(q.try_release().map(|n| n as usize).map_err(RxError::from));
        }
        let stalled = ring.released_count() - before;
        let tail = ring.snapshot().tail_register;
        let sw_tail = q.sw_tail();

        let mid = ring.released_count();
        gate.release();
        let (got, res, a_claims) = a.join().expect("consumer A panicked");
        deliveries.extend(tag(1, got));
        claims.extend(a_claims.into_iter().map(|c| (1, c)));
        note(res);
        (stalled, tail, sw_tail, ring.released_count() - mid)
    });

    let delivered = deliveries.iter().map(|d| d.packet.seq).collect();
    ContiguityReport {
        mutation,
        released_while_stalled: stalled,
        tail_while_stalled: tail_stalled,
        sw_tail_while_stalled: sw_tail_stalled,
        released_after_resume: resumed,
        tail_after_resume: ring.snapshot().tail_register,
        read_done_clear: q.read_done_is_clear(),
        delivered,
        violation,
        transparency_violations: ring.transparency_violations(),
        run: replay_result(&q, 3, vec![0, 1, 2], deliveries, claims, errors),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LivenessReport {
    pub ring_size: u32,
    pub batch_size: u32,
    pub consumers: usize,
    /// Packets held by the stalled consumer's outstanding claim.
    pub claimed_by_stalled: u64,
    /// Delivered by the other consumers between the stall and starvation.
    pub delivered_before_starvation: u64,
    /// `ring_size - claimed_by_stalled`.
    pub expected_before_starvation: u64,
    pub dropped_while_stalled: u64,
    pub delivered_after_resume: u64,
    pub injected_after_resume: u64,
    pub total_accepted: u64,
    pub total_delivered: u64,
    pub duplicates: Vec<u64>,
    pub missing: Vec<u64>,
    /// Recovery did not finish within the timeout.
    pub deadlocked: bool,
    pub transparency_violations: u64,
}

/// One consumer stalls holding a full batch while the others keep polling
/// and the NIC keeps offering packets. Measures how far the others get
/// before the ring starves, then resumes the stalled consumer and checks
/// that everything accepted is delivered exactly once.
pub fn liveness_replay(ring_size: u32, batch_size: u32, consumers: usize) -> LivenessReport {
    assert!(consumers >= 2, "need a stalled consumer and at least one other");
    let gate = Arc::new(StallGate::new(0, HookPoint::AfterClaim, 1));
    let q = queue(ring_size, ring_size as usize * 4, batch_size, Mutation::None, &gate);
    let ring = q.ring().clone();
    let stop = AtomicBool::new(false);
    let delivered_count = AtomicU64::new(0);
    let mut seq = 0u64;
    let mut accepted = Vec::new();
    for _ in 0..batch_size {
        assert!(ring.fill_one(&packet(seq)));
        accepted.push(seq);
        seq += 1;
    }

    let run_consumer = |c: &mut RxConsumer<'_>| {
        let mut bufs = Vec::new();
        let mut got = Vec::new();
        while !stop.load(Ordering::Acquire) {
            match c.rx_batch(&mut bufs) {
                Ok(0) | Err(_) if bufs.is_empty() => thread::yield_now(),
                _ => {}
            }
            let n = bufs.len() as u64;
            got.extend(seqs(&drain(&q, &mut bufs)));
            delivered_count.fetch_add(n, Ordering::AcqRel);
        }
        got
    };

    let r = thread::scope(|s| {
        let stalled = s.spawn(|| run_consumer(&mut q.consumer(0)));
        assert!(gate.wait_parked(PARK_TIMEOUT), "consumer 0 never claimed");
        let claimed_by_stalled = u64::from(q.rx_index().0);
        let others: Vec<_> = (1..consumers)
            .map(|i| {
                let run_consumer = &run_consumer;
                let q = &q;
                s.spawn(move || run_consumer(&mut q.consumer(i)))
            })
            .collect();

        // offer packets until the ring refuses and the others stop making progress
        let drops_at_stall = ring.snapshot().dropped_count;
        let settle = Duration::from_millis(20);
        loop {
            if ring.fill_one(&packet(seq)) {
                accepted.push(seq);
                seq += 1;
                continue;
            }
            seq += 1;
            let d = delivered_count.load(Ordering::Acquire);
            thread::sleep(settle);
            if delivered_count.load(Ordering::Acquire) == d && ring.free_slots() == 0 {
                break;
            }
        }
        let delivered_before_starvation = delivered_count.load(Ordering::Acquire);
        for _ in 0..100 {
            // every one of these is refused while the claim is held
            if ring.fill_one(&packet(seq)) {
                accepted.push(seq);
            }
            seq += 1;
        }
        let dropped_while_stalled = ring.snapshot().dropped_count - drops_at_stall;

        gate.release();
        let injected_after_resume = 2 * u64::from(ring_size);
        let mut offered = 0;
        let deadline = Instant::now() + Duration::from_secs(10);
        let mut deadlocked = false;
        while offered < injected_after_resume {
            if Instant::now() > deadline {
                deadlocked = true;
                break;
            }
            if ring.free_slots() == 0 {
                thread::yield_now();
                continue;
            }
            assert!(ring.fill_one(&packet(seq)));
            accepted.push(seq);
            seq += 1;
            offered += 1;
        }
        while delivered_count.load(Ordering::Acquire) < accepted.len() as u64 && !deadlocked {
            if Instant::now() > deadline {
                deadlocked = true;
            }
            thread::yield_now();
        }
        stop.store(true, Ordering::Release);
        let mut all = stalled.join().expect("stalled consumer panicked");
        for h in others {
            all.extend(h.join().expect("consumer panicked"));
        }
        (
            all,
            claimed_by_stalled,
            delivered_before_starvation,
            dropped_while_stalled,
            injected_after_resume,
            deadlocked,
        )
    });
    let (all, claimed_by_stalled, before, dropped, injected_after, deadlocked) = r;
    let present: HashSet<u64> = all.iter().copied().collect();
    let missing: Vec<u64> = accepted.iter().copied().filter(|s| !present.contains(s)).collect();
    LivenessReport {
        ring_size,
        batch_size,
        consumers,
        claimed_by_stalled,
        delivered_before_starvation: before,
        expected_before_starvation: u64::from(ring_size) - claimed_by_stalled,
        dropped_while_stalled: dropped,
        delivered_after_resume: all.len() as u64 - before,
        injected_after_resume: injected_after,
        total_accepted: accepted.len() as u64,
        total_delivered: all.len() as u64,
        duplicates: duplicates(&all),
        missing,
        deadlocked,
        transparency_violations: ring.transparency_violations(),
    }
}
