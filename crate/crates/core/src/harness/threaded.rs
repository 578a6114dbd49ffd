//! Wall-clock runner: one NIC thread, one OS thread per consumer, and the
//! calling thread as monitor.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::config::{ArrivalProcess, ExperimentConfig, ServiceMode};
use super::rig::{Receiver, Rig};
use super::simulated::collect_ring_state;
use super::{Delivery, HarnessError, RunStats, RunTrace};
use crate::hooks::{HookChain, Jitter, RxHook, StallGate};
use crate::ring::Packet;
use crate::rx::{Claim, RxError};

#[derive(Default)]
struct Shared {
    stop: AtomicBool,
    nic_done: AtomicBool,
    delivered: AtomicU64,
    tickets: AtomicU64,
}

struct ConsumerLog {
    deliveries: Vec<(u64, Packet)>,
    claims: Vec<Claim>,
    errors: Vec<String>,
}

fn spin_for(ns: u64) {
    let end = Instant::now() + Duration::from_nanos(ns);
    while Instant::now() < end {
        std::hint::spin_loop();
    }
}

pub(super) fn run(config: &ExperimentConfig, trace: Vec<Packet>) -> Result<(RunTrace, RunStats), HarnessError> {
    let gate = config.stall.map(|s| {
        let g = StallGate::new(s.thread, s.point, s.occurrence);
        Arc::new(match s.duration_ms {
            Some(ms) => g.with_auto_release(Duration::from_millis(ms)),
            None => g,
        })
    });
    let mut hooks: Vec<Arc<dyn RxHook>> = Vec::new();
    if config.jitter {
        hooks.push(Arc::new(Jitter::new(config.threads, config.seed)));
    }
    if let Some(g) = &gate {
        hooks.push(g.clone());
    }
    let hook: Option<Arc<dyn RxHook>> = match hooks.len() {
        0 => None,
        1 => hooks.pop(),
        _ => Some(Arc::new(HookChain(hooks))),
    };

    let rig = Rig::build(config, hook)?;
    let receivers = rig.receivers(config.threads, config.batch_size);
    let shared = Shared::default();
    let injected = Mutex::new((Vec::with_capacity(trace.len()), Vec::new()));
    let t0 = Instant::now();
    let now_ns = || t0.elapsed().as_nanos() as u64;
    let mut timed_out = false;

    let logs: Vec<ConsumerLog> = thread::scope(|s| {
        let rig = &rig;
        let shared = &shared;
        let injected = &injected;
        let trace = &trace;

        s.spawn(move || {
            let (mut inj, mut drop) = (Vec::with_capacity(trace.len()), Vec::new());
            'packets: for p in trace {
                let ring = rig.target(p);
                match config.arrival {
                    ArrivalProcess::Saturate => {
                        while ring.free_slots() == 0 {
                            if shared.stop.load(Ordering::Relaxed) {
                                break 'packets;
                            }
                            thread::yield_now();
                        }
                    }
                    _ => {
                        while now_ns() < p.t_inject {
                            if shared.stop.load(Ordering::Relaxed) {
                                break 'packets;
                            }
                            thread::yield_now();
                        }
                    }
                }
                let p = Packet {
                    t_inject: now_ns(),
                    ..*p
                };
                inj.push(p.seq);
                if !ring.fill_one(&p) {
                    drop.push(p.seq);
                }
            }
            *injected.lock().unwrap() = (inj, drop);
            shared.nic_done.store(true, Ordering::Release);
        });

        let handles: Vec<_> = receivers
            .into_iter()
            .map(|mut rx| s.spawn(move || consume(&mut rx, rig, shared, config, &now_ns)))
            .collect();

        // monitor
        let deadline = t0 + Duration::from_millis(config.timeout_ms);
        let idle = Duration::from_millis(config.idle_ms);
        let mut last_count = 0;
        let mut last_change = Instant::now();
        loop {
            thread::sleep(Duration::from_millis(1));
            let d = shared.delivered.load(Ordering::Acquire);
            if d != last_count {
                last_count = d;
                last_change = Instant::now();
            }
            if !shared.nic_done.load(Ordering::Acquire) {
                if Instant::now() > deadline {
                    timed_out = true;
                    break;
                }
                continue;
            }
            let (inj, drop) = {
                let g = injected.lock().unwrap();
                (g.0.len() as u64, g.1.len() as u64)
            };
            if d + drop >= inj || last_change.elapsed() >= idle {
                break;
            }
            if Instant::now() > deadline {
                timed_out = true;
                break;
            }
        }
        shared.stop.store(true, Ordering::Release);
        if let Some(g) = &gate {
            g.release();
        }
        handles
            .into_iter()
            .map(|h| h.join().expect("consumer panicked"))
            .collect()
    });

    rig.settle()?;
    let (inj, drop) = injected.into_inner().unwrap();
    let mut out = RunTrace {
        injected: inj,
        dropped: drop,
        ..RunTrace::default()
    };
    let mut all: Vec<(u64, Delivery)> = Vec::new();
    for (ci, log) in logs.into_iter().enumerate() {
        all.extend(
            log.deliveries
                .into_iter()
                .map(|(t, packet)| (t, Delivery { consumer: ci, packet })),
        );
        out.claims.extend(log.claims.into_iter().map(|c| (ci, c)));
        out.rx_errors.extend(log.errors);
    }
    all.sort_unstable_by_key(|(t, _)| *t);
    let last = all.iter().filter_map(|(_, d)| d.packet.t_deliver).max().unwrap_or(0);
    let first = all.iter().map(|(_, d)| d.packet.t_inject).min().unwrap_or(0).min(last);
    out.deliveries = all.into_iter().map(|(_, d)| d).collect();
    let stats = collect_ring_state(&rig, &mut out, last.saturating_sub(first), timed_out);
    Ok((out, stats))
}

fn consume(
    rx: &mut Receiver<'_>,
    rig: &Rig,
    shared: &Shared,
    config: &ExperimentConfig,
    now_ns: &dyn Fn() -> u64,
) -> ConsumerLog {
    let pool = rig.pool();
    let mut log = ConsumerLog {
        deliveries: Vec::new(),
        claims: Vec::new(),
        errors: Vec::new(),
    };
    let mut bufs = Vec::with_capacity(config.batch_size as usize);
    let mut batch = Vec::with_capacity(config.batch_size as usize);
    while !shared.stop.load(Ordering::Acquire) {
        bufs.clear();
        let res = rx.rx(&mut bufs);
        batch.clear();
        batch.extend(bufs.iter().map(|&h| pool.read(h)));
        pool.bulk_free(&bufs).expect("delivered buffers are owned");
        match res {
            Err(RxError::Pool(_)) | Ok(0) if batch.is_empty() => {
                thread::yield_now();
                continue;
            }
            Err(e) => log.errors.push(e.to_string()),
            Ok(_) => {}
        }
        match config.service.mode {
            ServiceMode::Spin => {
                for p in &mut batch {
                    spin_for(config.service.nanos(p.size_bytes));
                    p.t_deliver = Some(now_ns());
                }
            }
            ServiceMode::Hold => {
                let total: u64 = batch.iter().map(|p| config.service.nanos(p.size_bytes)).sum();
                thread::sleep(Duration::from_nanos(total));
                let t = now_ns();
                for p in &mut batch {
                    p.t_deliver = Some(t);
                }
            }
        }
        let n = batch.len() as u64;
        let first_ticket = shared.tickets.fetch_add(n, Ordering::AcqRel);
        log.deliveries
            .extend(batch.drain(..).enumerate().map(|(k, p)| (first_ticket + k as u64, p)));
        shared.delivered.fetch_add(n, Ordering::AcqRel);
    }
    log.claims = rx.take_claims();
    log
}
