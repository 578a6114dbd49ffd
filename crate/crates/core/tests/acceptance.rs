//! End-to-end acceptance checks. Runs as a plain binary so every criterion
//! prints its own PASS/FAIL line under a normal `cargo test`.
//!
//! Pass criterion ids (`c1` .. `c8`) as arguments to run a subset.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use corec::harness::scenarios::{aba_replay, contiguity_replay, liveness_replay};
use corec::harness::{
    line_rate_pps, run, validate_invariants, ArrivalProcess, ClockMode, ExperimentConfig, Mode, RunResult, ServiceCost,
    ServiceMode, SizeMix,
};
use corec::metrics::reorder_analyze;
use corec::queueing::{erlang_c, simulate, QueueModel, ServiceModel, SojournStats, Topology};
use corec::Mutation;

/// Tail writes rejected during honest (unmutated) runs anywhere in the suite.
static HONEST_VIOLATIONS: AtomicU64 = AtomicU64::new(0);

fn honest(r: &RunResult) {
    HONEST_VIOLATIONS.fetch_add(r.transparency_violations + r.ownership_violations, Ordering::Relaxed);
}

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(checks: &[(&str, bool)], detail: String) -> Self {
        let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
        let detail = if failed.is_empty() {
            detail
        } else {
            format!("failed: {}; {detail}", failed.join(", "))
        };
        Self {
            passed: failed.is_empty(),
            detail,
        }
    }
}

fn invariants_hold(r: &RunResult) -> Result<(), String> {
    match validate_invariants(r).into_iter().find(|c| !c.passed) {
        None => Ok(()),
        Some(c) => Err(format!("{}: {}", c.name, c.witness.unwrap_or_default())),
    }
}

// 1. exactly-once under contention
fn c1() -> Verdict {
    let cfg = ExperimentConfig {
        mode: Mode::Corec,
        threads: 4,
        ring_size: 1024,
        packets: 1_000_000,
        arrival: ArrivalProcess::Saturate,
        clock: ClockMode::WallClock,
        jitter: true,
        seed: 0xC0FFEE,
        service: ServiceCost::default(),
        flows: 256,
        timeout_ms: 120_000,
        ..ExperimentConfig::default()
    };
    let start = Instant::now();
    let r = run(&cfg).expect("run");
    let secs = start.elapsed().as_secs_f64();
    honest(&r);
    let inv = invariants_hold(&r);
    let duplicates = r.delivered as usize
        - r.trace
            .deliveries
            .iter()
            .map(|d| d.packet.seq)
            .collect::<std::collections::HashSet<_>>()
            .len();
    Verdict::new(
        &[
            ("invariants", inv.is_ok()),
            (
                "delivered = injected - in-flight",
                r.delivered + r.in_flight + r.dropped == r.injected,
            ),
            ("no duplicates", duplicates == 0),
            ("no transparency violations", r.transparency_violations == 0),
            ("runtime <= 60 s", secs <= 60.0),
            ("completed", !r.timed_out),
        ],
        format!(
            "delivered={} in_flight={} dropped={} per_thread={:?} throughput={:.0} pps runtime={secs:.1}s {}",
            r.delivered,
            r.in_flight,
            r.dropped,
            r.per_consumer,
            r.throughput_pps,
            inv.err().unwrap_or_default()
        ),
    )
}

// 2. ABA regression
fn c2() -> Verdict {
    let start = Instant::now();
    let good = aba_replay(Mutation::None);
    let t_good = start.elapsed();
    let start = Instant::now();
    let bad = aba_replay(Mutation::RawSlotClaimKey);
    let t_bad = start.elapsed();
    let repeat = aba_replay(Mutation::RawSlotClaimKey);
    honest(&good.run);
    Verdict::new(
        &[
            ("epoch build: no duplicates", good.duplicates.is_empty()),
            ("epoch build: stale CAS rejected", !good.stale_claim_won && good.cas_failures >= 1),
            ("epoch build: invariants", invariants_hold(&good.run).is_ok()),
            ("raw-slot build: duplicate delivery", !bad.duplicates.is_empty()),
            ("deterministic", repeat.delivered == bad.delivered),
            ("each replay < 1 s", t_good < Duration::from_secs(1) && t_bad < Duration::from_secs(1)),
        ],
        format!(
            "ring=4 laps={} epoch: delivered {} unique, cas_failures={}; raw-slot: duplicates {:?}, rejected tail writes={}; {:.1?}/{:.1?}",
            good.laps,
            good.delivered.len(),
            good.cas_failures,
            bad.duplicates,
            bad.transparency_violations,
            t_good,
            t_bad
        ),
    )
}

// 3. contiguity; evaluated last so it can cover every honest run
fn c3() -> Verdict {
    let r = contiguity_replay(Mutation::None);
    honest(&r.run);
    let m = contiguity_replay(Mutation::NonContiguousRelease);
    let total = HONEST_VIOLATIONS.load(Ordering::Relaxed);
    Verdict::new(
        &[
            ("release 0 while stalled", r.released_while_stalled == 0 && r.tail_while_stalled == 0),
            ("full drain on resume", r.released_after_resume == 2 && r.tail_after_resume == 2 && r.read_done_clear),
            ("invariants", invariants_hold(&r.run).is_ok()),
            ("mutation caught", m.violation.is_some()),
            ("zero violations in honest runs", total == 0),
        ],
        format!(
            "stalled: released={} tail={} sw_tail={}; resumed: released={} tail={}; mutation -> {}; honest-run violations={total}",
            r.released_while_stalled,
            r.tail_while_stalled,
            r.sw_tail_while_stalled.0,
            r.released_after_resume,
            r.tail_after_resume,
            m.violation.map(|v| format!("{:?} at slot {}", v.kind, v.slot)).unwrap_or("none".into()),
        ),
    )
}

// 4. liveness with a stalled claim holder
fn c4() -> Verdict {
    let r = liveness_replay(1024, 32, 4);
    HONEST_VIOLATIONS.fetch_add(r.transparency_violations, Ordering::Relaxed);
    let within = r.delivered_before_starvation.abs_diff(r.expected_before_starvation) <= u64::from(r.batch_size);
    Verdict::new(
        &[
            ("within +-BATCH_SIZE", within),
            ("dropped_count grows", r.dropped_while_stalled > 0),
            ("no deadlock", !r.deadlocked),
            (
                "full recovery",
                r.total_delivered == r.total_accepted && r.missing.is_empty(),
            ),
            ("no duplicates", r.duplicates.is_empty()),
        ],
        format!(
            "claimed={} delivered_before_starvation={} expected={} dropped={} after_resume={} accepted={} delivered={}",
            r.claimed_by_stalled,
            r.delivered_before_starvation,
            r.expected_before_starvation,
            r.dropped_while_stalled,
            r.delivered_after_resume,
            r.total_accepted,
            r.total_delivered
        ),
    )
}

// 5. queueing reproduction
fn c5() -> Verdict {
    const ARRIVALS: usize = 1_000_000;
    const SEEDS: [u64; 3] = [1, 2, 3];
    let start = Instant::now();
    let sim = |t: Topology, n: usize, rho: f64, s: ServiceModel, seed: u64| -> SojournStats {
        simulate(&QueueModel::at_load(t, n, rho, 1.0, s), ARRIVALS, seed).expect("stable model")
    };
    let avg = |v: &[SojournStats]| -> (f64, f64) {
        let k = v.len() as f64;
        (
            v.iter().map(|s| s.mean).sum::<f64>() / k,
            v.iter().map(|s| s.p99).sum::<f64>() / k,
        )
    };

    let mut dominates = true;
    let mut ratio_ok = true;
    let mut erlang_ok = true;
    let mut mm1_ok = true;
    let mut shrink_ok = true;
    let mut high_load_ok = true;
    let mut notes = Vec::new();
    let mut markov_gap = BTreeMap::new();

    for n in [4usize, 8] {
        for rho in [0.5, 0.7, 0.9] {
            let up: Vec<_> = SEEDS
                .iter()
                .map(|&s| sim(Topology::ScaleUp, n, rho, ServiceModel::Markovian, s))
                .collect();
            let out: Vec<_> = SEEDS
                .iter()
                .map(|&s| sim(Topology::ScaleOut, n, rho, ServiceModel::Markovian, s))
                .collect();
            dominates &= up.iter().zip(&out).all(|(u, o)| u.mean <= o.mean && u.p99 <= o.p99);
            let (um, up99) = avg(&up);
            let (om, op99) = avg(&out);
            if rho == 0.9 {
                ratio_ok &= op99 / up99 >= 2.0;
                notes.push(format!("N={n} p99 ratio@0.9={:.2}", op99 / up99));
            }
            let ec = erlang_c(rho * n as f64, 1.0, n).unwrap().mean_sojourn;
            let err = (um - ec).abs() / ec;
            erlang_ok &= err <= 0.03;
            notes.push(format!("N={n} rho={rho} erlang_err={:.2}%", err * 100.0));
            markov_gap.insert((n, (rho * 100.0) as u32), (om - um, op99 - up99));
        }
    }
    for rho in [0.5, 0.7, 0.9] {
        let runs: Vec<_> = SEEDS
            .iter()
            .map(|&s| sim(Topology::ScaleUp, 1, rho, ServiceModel::Markovian, s))
            .collect();
        let (m, _) = avg(&runs);
        let exact = 1.0 / (1.0 - rho);
        let err = (m - exact).abs() / exact;
        mm1_ok &= err <= 0.03;
        notes.push(format!("M/M/1 rho={rho} err={:.2}%", err * 100.0));
    }
    for n in [4usize, 8] {
        for rho in [0.5, 0.7, 0.9, 0.95] {
            let up: Vec<_> = SEEDS
                .iter()
                .map(|&s| sim(Topology::ScaleUp, n, rho, ServiceModel::Deterministic, s))
                .collect();
            let out: Vec<_> = SEEDS
                .iter()
                .map(|&s| sim(Topology::ScaleOut, n, rho, ServiceModel::Deterministic, s))
                .collect();
            let (um, up99) = avg(&up);
            let (om, op99) = avg(&out);
            if let Some(&(gm, gp)) = markov_gap.get(&(n, (rho * 100.0) as u32)) {
                shrink_ok &= om - um < gm && op99 - up99 < gp;
            }
            if rho == 0.95 {
                high_load_ok &= um < om && up99 < op99;
                notes.push(format!(
                    "N={n} det@0.95 mean {um:.2} vs {om:.2}, p99 {up99:.2} vs {op99:.2}"
                ));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Verdict::new(
        &[
            ("scale-up <= scale-out (mean, p99) at every point", dominates),
            ("p99 ratio >= 2 at rho=0.9", ratio_ok),
            ("M/M/N within 3% of Erlang C", erlang_ok),
            ("M/M/1 within 3% of 1/(mu-lambda)", mm1_ok),
            ("deterministic service shrinks the gap", shrink_ok),
            ("scale-up still ahead at rho=0.95", high_load_ok),
            ("runtime <= 5 min", secs <= 300.0),
        ],
        format!("{}; runtime={secs:.0}s", notes.join("; ")),
    )
}

/// Reordering workload: Poisson arrivals at line rate for the frame size,
/// per-packet service growing with size.
fn reorder_config(threads: usize, size: u32, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        mode: Mode::Corec,
        threads,
        packets: 50_000,
        arrival: ArrivalProcess::Poisson,
        rate_pps: line_rate_pps(size, 10.0),
        sizes: SizeMix::Fixed { bytes: size },
        flows: 16,
        service: ServiceCost {
            base_ns: 200.0,
            per_byte_ns: 0.1,
            mode: ServiceMode::Spin,
        },
        poll_cost_ns: 20,
        seed,
        ..ExperimentConfig::default()
    }
}

/// Brute-force reordering: compare every pair within a flow.
/// (received, reordered, max extent) for one flow or a whole run.
type Counts = (u64, u64, u64);

fn reorder_oracle(seqs: &[u64], flows: &[u32]) -> (u64, u64, u64, BTreeMap<u32, Counts>) {
    let mut per: BTreeMap<u32, Counts> = BTreeMap::new();
    for i in 0..seqs.len() {
        let larger = (0..i).filter(|&j| flows[j] == flows[i] && seqs[j] > seqs[i]).count() as u64;
        let e = per.entry(flows[i]).or_default();
        e.0 += 1;
        if larger > 0 {
            e.1 += 1;
            e.2 = e.2.max(larger);
        }
    }
    let received = per.values().map(|v| v.0).sum();
    let reordered = per.values().map(|v| v.1).sum();
    let max = per.values().map(|v| v.2).max().unwrap_or(0);
    (received, reordered, max, per)
}

// 6. reordering properties
fn c6() -> Verdict {
    const SIZES: [u32; 6] = [64, 128, 256, 512, 1024, 1500];
    let mut single_zero = true;
    let mut curve = Vec::new();
    for &size in &SIZES {
        let mut pct = 0.0;
        for seed in 1..=3 {
            let r = run(&reorder_config(4, size, seed)).expect("run");
            honest(&r);
            pct += r.reorder.as_ref().map_or(f64::NAN, |o| o.percent) / 3.0;
            for (mode, threads) in [(Mode::Corec, 1), (Mode::Baseline, 1), (Mode::Baseline, 4)] {
                let c = ExperimentConfig {
                    mode,
                    ..reorder_config(threads, size, seed)
                };
                let r = run(&c).expect("run");
                honest(&r);
                single_zero &= r.reorder.as_ref().is_some_and(|o| o.reordered == 0);
            }
        }
        curve.push(pct);
    }
    let monotone = curve.windows(2).all(|w| w[1] <= w[0]);
    let trend = curve[0] > *curve.last().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(4737);
    let mut oracle_ok = 0;
    for _ in 0..200 {
        let n = rng.gen_range(1..=1000usize);
        let mut seqs: Vec<u64> = (0..n as u64).collect();
        match rng.gen_range(0..3) {
            0 => seqs.shuffle(&mut rng),
            1 => {
                for _ in 0..rng.gen_range(0..=n / 10 + 1) {
                    let i = rng.gen_range(0..n);
                    let j = (i + rng.gen_range(0..8)).min(n - 1);
                    seqs.swap(i, j);
                }
            }
            _ => {}
        }
        let k = rng.gen_range(1..=5u32);
        let flows: Vec<u32> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let got = reorder_analyze(&seqs, &flows).expect("unique seqs");
        let (received, reordered, max, per) = reorder_oracle(&seqs, &flows);
        let per_got: BTreeMap<u32, Counts> = got
            .per_flow
            .iter()
            .map(|(&f, v)| (f, (v.received, v.reordered, v.max_distance)))
            .collect();
        if got.received == received && got.reordered == reordered && got.max_distance == max && per_got == per {
            oracle_ok += 1;
        }
    }
    Verdict::new(
        &[
            ("single-consumer and flow-pinned runs 0%", single_zero),
            ("4-consumer % non-increasing with size", monotone),
            ("reordering actually drops", trend),
            ("brute-force oracle 200/200", oracle_ok == 200),
        ],
        format!(
            "sizes {:?} -> reordered % {:?}; oracle {oracle_ok}/200",
            SIZES,
            curve.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>()
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// 7. scalability trend
fn c7() -> Verdict {
    let cfg = |mode: Mode, threads: usize| ExperimentConfig {
        mode,
        threads,
        packets: 40_000,
        arrival: ArrivalProcess::Saturate,
        clock: ClockMode::WallClock,
        sizes: SizeMix::Fixed { bytes: 64 },
        service: ServiceCost {
            base_ns: 10_000.0,
            per_byte_ns: 0.0,
            mode: ServiceMode::Hold,
        },
        seed: 7,
        ..ExperimentConfig::default()
    };
    let tput = |mode: Mode, threads: usize| -> f64 {
        median(
            (0..3)
                .map(|_| {
                    let r = run(&cfg(mode, threads)).expect("run");
                    honest(&r);
                    assert!(invariants_hold(&r).is_ok(), "{:?}", invariants_hold(&r));
                    r.throughput_pps
                })
                .collect(),
        )
    };
    let corec: Vec<f64> = (1..=4).map(|t| tput(Mode::Corec, t)).collect();
    let base = tput(Mode::Baseline, 1);
    Verdict::new(
        &[
            ("2 threads >= 1.5 x 1 thread", corec[1] >= 1.5 * corec[0]),
            (
                "non-decreasing through 4 threads",
                corec.windows(2).all(|w| w[1] >= w[0]),
            ),
            ("1-thread corec >= 0.95 x baseline", corec[0] >= 0.95 * base),
        ],
        format!(
            "corec pps by threads {:?}, baseline 1-thread {:.0} (median of 3, 10 us held service per packet)",
            corec.iter().map(|t| format!("{t:.0}")).collect::<Vec<_>>(),
            base
        ),
    )
}

// 8. single-thread equivalence
fn c8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut identical = 0;
    let mut with_drops = 0;
    let mut first_mismatch = None;
    for i in 0..100 {
        let ring_size = [16u32, 64, 256, 1024][rng.gen_range(0..4)];
        let cfg = ExperimentConfig {
            threads: 1,
            ring_size,
            batch_size: rng.gen_range(1..=ring_size.min(64)),
            packets: rng.gen_range(100..5_000),
            arrival: if rng.gen_bool(0.5) {
                ArrivalProcess::Poisson
            } else {
                ArrivalProcess::Constant
            },
            rate_pps: rng.gen_range(1e5..2e7),
            sizes: SizeMix::Mixed {
                min: 64,
                max: 1500,
                shape: rng.gen_range(0.8..2.0),
            },
            flows: rng.gen_range(1..100),
            service: ServiceCost {
                base_ns: rng.gen_range(0.0..500.0),
                per_byte_ns: rng.gen_range(0.0..1.0),
                mode: ServiceMode::Spin,
            },
            poll_cost_ns: rng.gen_range(0..50),
            seed: 1000 + i,
            ..ExperimentConfig::default()
        };
        let a = run(&ExperimentConfig {
            mode: Mode::Corec,
            ..cfg.clone()
        })
        .expect("run");
        let b = run(&ExperimentConfig {
            mode: Mode::Baseline,
            ..cfg
        })
        .expect("run");
        honest(&a);
        honest(&b);
        let bytes = |r: &RunResult| r.delivered_packets().flat_map(|p| p.to_bytes()).collect::<Vec<u8>>();
        if bytes(&a) == bytes(&b) && a.trace.dropped == b.trace.dropped {
            identical += 1;
        } else if first_mismatch.is_none() {
            first_mismatch = Some(i);
        }
        with_drops += usize::from(a.dropped > 0);
    }
    Verdict::new(
        &[("100/100 byte-identical", identical == 100)],
        format!("{identical}/100 identical ({with_drops} traces with drops); first mismatch {first_mismatch:?}"),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| f.eq_ignore_ascii_case(id));
    type Criterion = (&'static str, &'static str, fn() -> Verdict);
    let criteria: [Criterion; 8] = [
        ("c1", "exactly-once stress", c1),
        ("c2", "ABA regression", c2),
        ("c4", "stalled-claim liveness", c4),
        ("c5", "queueing reproduction", c5),
        ("c6", "reordering properties", c6),
        ("c7", "scalability trend", c7),
        ("c8", "single-thread equivalence", c8),
        ("c3", "contiguity and transparency", c3),
    ];
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !wanted(id) {
            continue;
        }
        let start = Instant::now();
        let v = f();
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!(
            "[{tag}] {} {name} ({:.1}s): {}",
            id.to_uppercase(),
            start.elapsed().as_secs_f64(),
            v.detail
        );
        failed += usize::from(!v.passed);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
