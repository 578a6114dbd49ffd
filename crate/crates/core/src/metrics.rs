//! Reordering and latency measurement over completed runs.
//!
//! A packet is reordered when it arrives after a packet of the same flow
//! with a larger sequence number (its sequence number is below the flow's
//! next-expected value). Its extent is the number of earlier-arrived packets
//! of that flow with larger sequence numbers.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::queueing::nearest_rank;
use crate::ring::Packet;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("sequence number {seq} appears twice in flow {flow_id}")]
    DuplicateSeq { flow_id: u32, seq: u64 },
    #[error("packet {seq} has no delivery timestamp")]
    MissingTimestamp { seq: u64 },
    #[error("packet {seq} delivered before it was injected")]
    ClockSkew { seq: u64 },
    #[error("no samples")]
    EmptyInput,
    #[error("{seqs} sequence numbers but {flows} flow ids")]
    LengthMismatch { seqs: usize, flows: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlowReorder {
    pub received: u64,
    pub reordered: u64,
    pub max_distance: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReorderReport {
    /// Totals over all flows, each flow analysed on its own.
    pub received: u64,
    pub reordered: u64,
    /// Percentage of received packets that were reordered (0 to 100).
    pub percent: f64,
    pub max_distance: u64,
    pub per_flow: BTreeMap<u32, FlowReorder>,
    /// The same analysis ignoring flow boundaries. `None` when sequence
    /// numbers are not globally unique.
    pub global: Option<FlowReorder>,
}

impl ReorderReport {
    pub fn ratio(&self) -> f64 {
        if self.received == 0 {
            0.0
        } else {
            self.reordered as f64 / self.received as f64
        }
    }
}

/// Fenwick tree counting inserted ranks.
struct RankCounter(Vec<u32>);

impl RankCounter {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn insert(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `<= rank`.
    fn at_most(&self, rank: usize) -> u64 {
        let mut i = rank + 1;
        let mut s = 0u64;
        while i > 0 {
            s += u64::from(self.0[i]);
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Reordering of one stream given in arrival order.
fn analyze_stream(seqs: &[u64]) -> Result<FlowReorder, u64> {
    let mut sorted = seqs.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(w[0]);
    }
    let mut counter = RankCounter::new(sorted.len());
    let mut out = FlowReorder::default();
    for (seen, &s) in seqs.iter().enumerate() {
        let rank = sorted.binary_search(&s).expect("present");
        let larger_before = seen as u64 - counter.at_most(rank);
        if larger_before > 0 {
            out.reordered += 1;
            out.max_distance = out.max_distance.max(larger_before);
        }
        counter.insert(rank);
    }
    out.received = seqs.len() as u64;
    Ok(out)
}

/// Reordering report for packets given in arrival order.
pub fn reorder_analyze(seqs: &[u64], flow_ids: &[u32]) -> Result<ReorderReport, MetricsError> {
    if seqs.len() != flow_ids.len() {
        return Err(MetricsError::LengthMismatch {
            seqs: seqs.len(),
            flows: flow_ids.len(),
        });
    }
    let mut by_flow: HashMap<u32, Vec<u64>> = HashMap::new();
    for (&s, &f) in seqs.iter().zip(flow_ids) {
        by_flow.entry(f).or_default().push(s);
    }
    let mut report = ReorderReport::default();
    for (flow_id, stream) in by_flow {
        let r = analyze_stream(&stream).map_err(|seq| MetricsError::DuplicateSeq { flow_id, seq })?;
        report.received += r.received;
        report.reordered += r.reordered;
        report.max_distance = report.max_distance.max(r.max_distance);
        report.per_flow.insert(flow_id, r);
    }
    report.percent = 100.0 * report.ratio();
    report.global = analyze_stream(seqs).ok();
    Ok(report)
}

/// Convenience wrapper over delivered packets in arrival order.
pub fn reorder_analyze_packets(packets: &[Packet]) -> Result<ReorderReport, MetricsError> {
    let seqs: Vec<u64> = packets.iter().map(|p| p.seq).collect();
    let flows: Vec<u32> = packets.iter().map(|p| p.flow_id).collect();
    reorder_analyze(&seqs, &flows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    pub count: usize,
    pub mean: f64,
    pub p50: u64,
    pub p99: u64,
    pub max: u64,
    /// Sorted latency samples; sample `i` is the `(i + 1) / n` quantile.
    #[serde(skip)]
    pub cdf: Vec<u64>,
}

impl LatencyReport {
    pub fn from_samples(mut samples: Vec<u64>) -> Result<Self, MetricsError> {
        if samples.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        samples.sort_unstable();
        let n = samples.len();
        let sum: u128 = samples.iter().map(|&s| u128::from(s)).sum();
        Ok(Self {
            count: n,
            mean: sum as f64 / n as f64,
            p50: nearest_rank(&samples, 0.50),
            p99: nearest_rank(&samples, 0.99),
            max: samples[n - 1],
            cdf: samples,
        })
    }

    /// `(latency, cumulative fraction)` pairs, thinned to at most `points`.
    pub fn cdf_points(&self, points: usize) -> Vec<(u64, f64)> {
        let n = self.cdf.len();
        let step = n.div_ceil(points.max(1)).max(1);
        let mut out: Vec<(u64, f64)> = (step - 1..n)
            .step_by(step)
            .map(|i| (self.cdf[i], (i + 1) as f64 / n as f64))
            .collect();
        if out.last().map(|&(_, f)| f) != Some(1.0) && n > 0 {
            out.push((self.cdf[n - 1], 1.0));
        }
        out
    }

    pub fn write_cdf_csv<W: Write>(&self, points: usize, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["latency_ns", "fraction"])?;
        for (l, f) in self.cdf_points(points) {
            w.write_record([l.to_string(), f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Latency (`t_deliver - t_inject`) over delivered packets.
pub fn latency_analyze(packets: &[Packet]) -> Result<LatencyReport, MetricsError> {
    if packets.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let samples = packets
        .iter()
        .map(|p| {
            let d = p.t_deliver.ok_or(MetricsError::MissingTimestamp { seq: p.seq })?;
            d.checked_sub(p.t_inject).ok_or(MetricsError::ClockSkew { seq: p.seq })
        })
        .collect::<Result<Vec<_>, _>>()?;
    LatencyReport::from_samples(samples)
}
