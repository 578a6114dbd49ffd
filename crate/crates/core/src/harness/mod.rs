//! Experiment runner: builds a scale-up (shared ring) or scale-out
//! (ring-per-thread) topology, plays a synthetic trace into it, and gathers
//! throughput, latency, reordering and invariant data.

mod config;
mod rig;
pub mod scenarios;
mod simulated;
mod threaded;
mod trace;
mod validate;

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

pub use config::{
    ArrivalProcess, ClockMode, ConfigError, ExperimentConfig, Mode, ServiceCost, ServiceMode, SizeMix, StallPlan,
};
pub use trace::{generate_trace, line_rate_pps};
pub use validate::{validate_invariants, InvariantCheck};

use crate::metrics::{latency_analyze, reorder_analyze_packets, LatencyReport, ReorderReport};
use crate::ring::{Packet, RingError};
use crate::rx::{Claim, RxError, TransactionId};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ring(#[from] RingError),
    #[error(transparent)]
    Rx(#[from] RxError),
    #[error("trace has {got} packets, config asks for {want}")]
    TraceLength { got: usize, want: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Delivery {
    pub consumer: usize,
    pub packet: Packet,
}

/// Raw record of a run, for invariant checking.
#[derive(Clone, Debug, Default)]
pub struct RunTrace {
    /// Sequence numbers the NIC attempted to install, in order.
    pub injected: Vec<u64>,
    pub dropped: Vec<u64>,
    /// Packets still sitting in the ring(s) at shutdown.
    pub pending: Vec<u64>,
    /// Every delivered packet in delivery order.
    pub deliveries: Vec<Delivery>,
    /// Won claims per consumer (corec only).
    pub claims: Vec<(usize, Claim)>,
    pub initial_id: TransactionId,
    /// Per ring: cumulative released count after each accepted tail write.
    pub tail_writes: Vec<Vec<u64>>,
    /// Per ring: descriptors the NIC filled.
    pub installed: Vec<u64>,
    pub read_done_quiescent: bool,
    /// Receive-path errors seen by consumers, rendered.
    pub rx_errors: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub mode: Mode,
    pub threads: usize,
    pub clock: ClockMode,
    /// Offered load in packets per second; `None` when saturating.
    pub offered_pps: Option<f64>,
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
    /// Accepted by the NIC but not delivered at shutdown.
    pub in_flight: u64,
    /// Delivered packets per second of (simulated or wall) time.
    pub throughput_pps: f64,
    pub elapsed_ns: u64,
    pub latency: Option<LatencyReport>,
    pub reorder: Option<ReorderReport>,
    pub transparency_violations: u64,
    pub ownership_violations: u64,
    pub per_consumer: Vec<u64>,
    pub timed_out: bool,
    #[serde(skip)]
    pub trace: RunTrace,
}

impl RunResult {
    pub fn delivered_packets(&self) -> impl Iterator<Item = &Packet> {
        self.trace.deliveries.iter().map(|d| &d.packet)
    }
}

/// Runs one experiment on a freshly generated trace.
pub fn run(config: &ExperimentConfig) -> Result<RunResult, HarnessError> {
    config.validate()?;
    run_trace(config, generate_trace(config))
}

/// Runs one experiment on a caller-supplied trace. Packets must carry
/// consecutive `seq` from 0 and non-decreasing `t_inject`.
pub fn run_trace(config: &ExperimentConfig, trace: Vec<Packet>) -> Result<RunResult, HarnessError> {
    config.validate()?;
    if trace.len() as u64 != config.packets {
        return Err(HarnessError::TraceLength {
            got: trace.len(),
            want: config.packets,
        });
    }
    let (trace, stats) = match config.clock {
        ClockMode::Simulated => simulated::run(config, trace)?,
        ClockMode::WallClock => threaded::run(config, trace)?,
    };
    Ok(finish(config, trace, stats))
}

/// Figures the clock-specific runners hand back besides the trace.
pub(crate) struct RunStats {
    pub elapsed_ns: u64,
    pub transparency_violations: u64,
    pub ownership_violations: u64,
    pub timed_out: bool,
}

fn finish(config: &ExperimentConfig, trace: RunTrace, stats: RunStats) -> RunResult {
    let delivered: Vec<Packet> = trace.deliveries.iter().map(|d| d.packet).collect();
    let mut per_consumer = vec![0u64; config.threads];
    for d in &trace.deliveries {
        per_consumer[d.consumer] += 1;
    }
    let accepted = (trace.injected.len() - trace.dropped.len()) as u64;
    let throughput_pps = if stats.elapsed_ns == 0 {
        0.0
    } else {
        delivered.len() as f64 * 1e9 / stats.elapsed_ns as f64
    };
    RunResult {
        mode: config.mode,
        threads: config.threads,
        clock: config.clock,
        offered_pps: (config.arrival != ArrivalProcess::Saturate).then_some(config.rate_pps),
        injected: trace.injected.len() as u64,
        delivered: delivered.len() as u64,
        dropped: trace.dropped.len() as u64,
        in_flight: accepted.saturating_sub(delivered.len() as u64),
        throughput_pps,
        elapsed_ns: stats.elapsed_ns,
        latency: latency_analyze(&delivered).ok(),
        reorder: reorder_analyze_packets(&delivered).ok(),
        transparency_violations: stats.transparency_violations,
        ownership_violations: stats.ownership_violations,
        per_consumer,
        timed_out: stats.timed_out,
        trace,
    }
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub mode: String,
    pub threads: usize,
    pub load_pps: Option<f64>,
    pub throughput_pps: f64,
    pub mean_ns: Option<f64>,
    pub p99_ns: Option<u64>,
    pub reorder_pct: Option<f64>,
}

impl From<&RunResult> for CompareRow {
    fn from(r: &RunResult) -> Self {
        Self {
            mode: r.mode.to_string(),
            threads: r.threads,
            load_pps: r.offered_pps,
            throughput_pps: r.throughput_pps,
            mean_ns: r.latency.as_ref().map(|l| l.mean),
            p99_ns: r.latency.as_ref().map(|l| l.p99),
            reorder_pct: r.reorder.as_ref().map(|o| o.percent),
        }
    }
}

/// Runs every config in turn. With `seed` set, all runs share it so they
/// see the same trace shape.
pub fn compare(configs: &[ExperimentConfig], seed: Option<u64>) -> Result<Vec<(CompareRow, RunResult)>, HarnessError> {
    configs
        .iter()
        .map(|c| {
            let mut c = c.clone();
            if let Some(s) = seed {
                c.seed = s;
            }
            let r = run(&c)?;
            Ok((CompareRow::from(&r), r))
        })
        .collect()
}

pub fn write_compare_csv<W: Write>(rows: &[CompareRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
