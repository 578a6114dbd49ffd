//! Deterministic virtual-time runner. Consumers are interleaved on the
//! calling thread; each receive call runs the real receive path to
//! completion, then the consumer is busy for the batch's service time.
//!
//! Event order at equal timestamps: arrivals first, then consumers by
//! ascending index.

use super::config::{ArrivalProcess, ExperimentConfig};
use super::rig::Rig;
use super::{Delivery, HarnessError, RunStats, RunTrace};
use crate::ring::Packet;

struct Pending {
    t: u64,
    consumer: usize,
    order: u64,
    packet: Packet,
}

pub(super) fn run(config: &ExperimentConfig, trace: Vec<Packet>) -> Result<(RunTrace, RunStats), HarnessError> {
    let rig = Rig::build(config, None)?;
    let mut receivers = rig.receivers(config.threads, config.batch_size);
    let pool = rig.pool().clone();
    let saturate = config.arrival == ArrivalProcess::Saturate;

    let mut out = RunTrace::default();
    let mut ready = vec![0u64; config.threads];
    let mut active = vec![true; config.threads];
    let mut next = 0usize;
    let mut bufs = Vec::with_capacity(config.batch_size as usize);
    let mut done: Vec<Pending> = Vec::with_capacity(trace.len());
    let mut order = 0u64;

    let inject = |p: &Packet, out: &mut RunTrace| {
        out.injected.push(p.seq);
        if !rig.target(p).fill_one(p) {
            out.dropped.push(p.seq);
        }
    };

    while let Some(ci) = (0..config.threads)
        .filter(|&i| active[i])
        .min_by_key(|&i| (ready[i], i))
    {
        let now = ready[ci];
        if saturate {
            while next < trace.len() && rig.target(&trace[next]).free_slots() > 0 {
                let p = Packet {
                    t_inject: now,
                    ..trace[next]
                };
                inject(&p, &mut out);
                next += 1;
            }
        } else {
            while next < trace.len() && trace[next].t_inject <= now {
                inject(&trace[next], &mut out);
                next += 1;
            }
        }

        bufs.clear();
        let res = receivers[ci].rx(&mut bufs);
        let mut t = now + config.poll_cost_ns;
        for &h in &bufs {
            let mut p = pool.read(h);
            t += config.service.nanos(p.size_bytes);
            p.t_deliver = Some(t);
            done.push(Pending {
                t,
                consumer: ci,
                order,
                packet: p,
            });
            order += 1;
        }
        pool.bulk_free(&bufs).expect("delivered buffers are owned");
        if let Err(e) = res {
            out.rx_errors.push(e.to_string());
        }

        if !bufs.is_empty() {
            ready[ci] = t;
        } else if next < trace.len() {
            // saturated rings only gain room when some busy consumer finishes
            let wake = if saturate {
                (0..config.threads)
                    .filter(|&j| active[j] && ready[j] > now)
                    .map(|j| ready[j])
                    .min()
                    .unwrap_or(now + 1)
            } else {
                trace[next].t_inject
            };
            ready[ci] = wake.max(t).max(now + 1);
        } else {
            active[ci] = false;
        }
    }

    // anything a stopped consumer could not see is still pending
    rig.settle()?;
    done.sort_by_key(|d| (d.t, d.consumer, d.order));
    let first = trace.first().map_or(0, |p| p.t_inject);
    let last = done.last().map_or(first, |d| d.t);
    out.deliveries = done
        .into_iter()
        .map(|d| Delivery {
            consumer: d.consumer,
            packet: d.packet,
        })
        .collect();
    for (ci, r) in receivers.iter_mut().enumerate() {
        out.claims.extend(r.take_claims().into_iter().map(|c| (ci, c)));
    }
    let stats = collect_ring_state(&rig, &mut out, last.saturating_sub(first), false);
    Ok((out, stats))
}

pub(super) fn collect_ring_state(rig: &Rig, out: &mut RunTrace, elapsed_ns: u64, timed_out: bool) -> RunStats {
    let rings = rig.rings();
    out.pending = rings.iter().flat_map(|r| r.pending_packets()).map(|p| p.seq).collect();
    out.tail_writes = rings.iter().map(|r| r.tail_trace().unwrap_or_default()).collect();
    out.installed = rings.iter().map(|r| r.installed_count()).collect();
    out.read_done_quiescent = rig.read_done_quiescent();
    RunStats {
        elapsed_ns,
        transparency_violations: rings.iter().map(|r| r.transparency_violations()).sum(),
        ownership_violations: rings.iter().map(|r| r.ownership_violations()).sum(),
        timed_out,
    }
}
