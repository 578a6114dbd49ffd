use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use super::RunResult;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    /// First counterexample found, if any.
    pub witness: Option<String>,
}

impl InvariantCheck {
    fn pass(name: &'static str) -> Self {
        Self {
            name,
            passed: true,
            witness: None,
        }
    }

    fn fail(name: &'static str, witness: String) -> Self {
        Self {
            name,
            passed: false,
            witness: Some(witness),
        }
    }

    fn from_witness(name: &'static str, witness: Option<String>) -> Self {
        witness.map_or_else(|| Self::pass(name), |w| Self::fail(name, w))
    }
}

/// Checks a finished run against the receive-path invariants. Every check
/// is reported, pass or fail.
pub fn validate_invariants(result: &RunResult) -> Vec<InvariantCheck> {
    vec![
        exactly_once(result),
        claim_disjointness(result),
        tail_monotonicity(result),
        InvariantCheck::from_witness(
            "read_done_quiescence",
            (!result.trace.read_done_quiescent).then(|| "completion bits left set after shutdown".to_string()),
        ),
        InvariantCheck::from_witness(
            "transparency",
            (result.transparency_violations + result.ownership_violations > 0).then(|| {
                format!(
                    "{} rejected tail writes, {} fills on software-owned slots",
                    result.transparency_violations, result.ownership_violations
                )
            }),
        ),
    ]
}

/// Delivered multiset equals injected minus dropped minus still pending,
/// with no repeats.
fn exactly_once(r: &RunResult) -> InvariantCheck {
    const NAME: &str = "exactly_once";
    let t = &r.trace;
    let mut seen: HashMap<u64, usize> = HashMap::with_capacity(t.deliveries.len());
    for (i, d) in t.deliveries.iter().enumerate() {
        if let Some(first) = seen.insert(d.packet.seq, i) {
            return InvariantCheck::fail(
                NAME,
                format!(
                    "seq {} delivered at positions {first} and {i} (consumers {} and {})",
                    d.packet.seq, t.deliveries[first].consumer, d.consumer
                ),
            );
        }
    }
    let dropped: BTreeSet<u64> = t.dropped.iter().copied().collect();
    let pending: BTreeSet<u64> = t.pending.iter().copied().collect();
    let injected: BTreeSet<u64> = t.injected.iter().copied().collect();
    if let Some(seq) = seen.keys().find(|s| !injected.contains(s) || dropped.contains(s)) {
        return InvariantCheck::fail(NAME, format!("seq {seq} delivered but never accepted by the NIC"));
    }
    if let Some(seq) = pending.iter().find(|s| seen.contains_key(s)) {
        return InvariantCheck::fail(NAME, format!("seq {seq} delivered and still pending in the ring"));
    }
    let lost: Vec<u64> = t
        .injected
        .iter()
        .copied()
        .filter(|s| !dropped.contains(s) && !pending.contains(s) && !seen.contains_key(s))
        .take(5)
        .collect();
    if !lost.is_empty() {
        return InvariantCheck::fail(NAME, format!("accepted but neither delivered nor pending: {lost:?}"));
    }
    InvariantCheck::pass(NAME)
}

/// Won claims cover the transaction-ID space without overlap or gaps.
fn claim_disjointness(r: &RunResult) -> InvariantCheck {
    const NAME: &str = "claim_disjointness";
    let t = &r.trace;
    let mut spans: Vec<(u64, u64, usize)> = t
        .claims
        .iter()
        .map(|&(c, cl)| {
            let start = u64::from(cl.first_id.since(t.initial_id));
            (start, start + u64::from(cl.count), c)
        })
        .collect();
    spans.sort_unstable();
    let mut end = 0u64;
    for w in &spans {
        if w.0 < end {
            return InvariantCheck::fail(
                NAME,
                format!("claim [{}, {}) by consumer {} overlaps IDs below {end}", w.0, w.1, w.2),
            );
        }
        if w.0 > end {
            return InvariantCheck::fail(NAME, format!("IDs [{end}, {}) were never claimed", w.0));
        }
        end = w.1;
    }
    InvariantCheck::pass(NAME)
}

/// The NIC's released total only moves forward and never passes what it
/// filled.
fn tail_monotonicity(r: &RunResult) -> InvariantCheck {
    const NAME: &str = "tail_monotonicity";
    for (ring, writes) in r.trace.tail_writes.iter().enumerate() {
        if let Some(w) = writes.windows(2).find(|w| w[1] <= w[0]) {
            return InvariantCheck::fail(NAME, format!("ring {ring}: released total went {} -> {}", w[0], w[1]));
        }
        let installed = r.trace.installed.get(ring).copied().unwrap_or(0);
        if let Some(&last) = writes.last() {
            if last > installed {
                return InvariantCheck::fail(
                    NAME,
                    format!("ring {ring}: released {last} descriptors but only {installed} were filled"),
                );
            }
        }
    }
    InvariantCheck::pass(NAME)
}
