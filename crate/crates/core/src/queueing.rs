//! Discrete-event simulation of one shared FIFO queue served by N servers
//! (scale-up, M/M/N or M/D/N) against N independent single-server queues
//! fed by a uniform random split of the same Poisson stream (scale-out,
//! N×M/M/1 or N×M/D/1).

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BinaryHeap, VecDeque};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueueingError {
    #[error("rates must be positive (lambda={lambda}, mu={mu})")]
    InvalidRate { lambda: f64, mu: f64 },
    #[error("system is unstable: utilization {0} >= 1")]
    Unstable(f64),
    #[error("need at least one server")]
    NoServers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// One queue, N servers.
    ScaleUp,
    /// N queues, one server each.
    ScaleOut,
}

impl Topology {
    pub fn label(self, n: usize, service: ServiceModel) -> String {
        let s = match service {
            ServiceModel::Markovian => "M",
            ServiceModel::Deterministic => "D",
        };
        match self {
            Topology::ScaleUp => format!("M/{s}/{n}"),
            Topology::ScaleOut => format!("{n}xM/{s}/1"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceModel {
    Markovian,
    Deterministic,
}

impl std::fmt::Display for ServiceModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ServiceModel::Markovian => "markovian",
            ServiceModel::Deterministic => "deterministic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueueModel {
    pub topology: Topology,
    pub arrival_rate: f64,
    pub service_rate: f64,
    pub service: ServiceModel,
    pub servers: usize,
    /// Fraction of arrivals excluded from the statistics.
    pub warmup_fraction: f64,
}

impl QueueModel {
    pub fn new(
        topology: Topology,
        servers: usize,
        arrival_rate: f64,
        service_rate: f64,
        service: ServiceModel,
    ) -> Self {
        Self {
            topology,
            arrival_rate,
            service_rate,
            service,
            servers,
            warmup_fraction: 0.1,
        }
    }

    /// Model whose per-server utilization is `rho`.
    pub fn at_load(topology: Topology, servers: usize, rho: f64, service_rate: f64, service: ServiceModel) -> Self {
        Self::new(
            topology,
            servers,
            rho * servers as f64 * service_rate,
            service_rate,
            service,
        )
    }

    pub fn utilization(&self) -> f64 {
        self.arrival_rate / (self.servers as f64 * self.service_rate)
    }

    fn validate(&self) -> Result<(), QueueingError> {
        if !(self.arrival_rate > 0.0 && self.service_rate > 0.0) {
            return Err(QueueingError::InvalidRate {
                lambda: self.arrival_rate,
                mu: self.service_rate,
            });
        }
        if self.servers == 0 {
            return Err(QueueingError::NoServers);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SojournStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

impl SojournStats {
    /// Nearest-rank statistics; sorts `samples` in place.
    pub fn from_samples(samples: &mut [f64]) -> Self {
        if samples.is_empty() {
            return Self {
                count: 0,
                mean: f64::NAN,
                p50: f64::NAN,
                p99: f64::NAN,
                max: f64::NAN,
            };
        }
        samples.sort_unstable_by(f64::total_cmp);
        let n = samples.len();
        Self {
            count: n,
            mean: samples.iter().sum::<f64>() / n as f64,
            p50: nearest_rank(samples, 0.50),
            p99: nearest_rank(samples, 0.99),
            max: samples[n - 1],
        }
    }
}

/// Nearest-rank quantile of sorted samples: the value at rank ceil(q·n).
pub fn nearest_rank<T: Copy>(sorted: &[T], q: f64) -> T {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Whole-run occupancy figures, used for Little's-law checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Occupancy {
    /// Time-averaged number of customers in the system.
    pub mean_in_system: f64,
    /// Arrivals divided by the time of the last arrival.
    pub arrival_rate: f64,
    /// Mean sojourn over every customer, warm-up included.
    pub mean_sojourn: f64,
}

#[derive(Clone, Copy, Debug)]
enum EventKind {
    Arrival,
    Departure { station: usize, server: usize },
}

#[derive(Clone, Copy, Debug)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == CmpOrdering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    // min-heap on (time, insertion order)
    fn cmp(&self, other: &Self) -> CmpOrdering {
        other.time.total_cmp(&self.time).then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Clone, Copy, Debug)]
struct Customer {
    index: usize,
    arrived: f64,
}

struct Station {
    waiting: VecDeque<Customer>,
    busy: Vec<Option<Customer>>,
}

pub fn simulate(model: &QueueModel, n_arrivals: usize, seed: u64) -> Result<SojournStats, QueueingError> {
    simulate_with_occupancy(model, n_arrivals, seed).map(|(s, _)| s)
}

pub fn simulate_with_occupancy(
    model: &QueueModel,
    n_arrivals: usize,
    seed: u64,
) -> Result<(SojournStats, Occupancy), QueueingError> {
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inter = Exp::new(model.arrival_rate).expect("validated rate");
    let service_exp = Exp::new(model.service_rate).expect("validated rate");
    let service_time = |rng: &mut ChaCha8Rng| match model.service {
        ServiceModel::Markovian => service_exp.sample(rng),
        ServiceModel::Deterministic => 1.0 / model.service_rate,
    };

    let mut stations: Vec<Station> = match model.topology {
        Topology::ScaleUp => vec![Station {
            waiting: VecDeque::new(),
            busy: vec![None; model.servers],
        }],
        Topology::ScaleOut => (0..model.servers)
            .map(|_| Station {
                waiting: VecDeque::new(),
                busy: vec![None],
            })
            .collect(),
    };

    let warmup = (model.warmup_fraction * n_arrivals as f64).floor() as usize;
    let mut samples = Vec::with_capacity(n_arrivals.saturating_sub(warmup));
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<Event>, time: f64, kind: EventKind| {
        heap.push(Event { time, seq, kind });
        seq += 1;
    };

    if n_arrivals > 0 {
        let t0 = inter.sample(&mut rng);
        push(&mut heap, t0, EventKind::Arrival);
    }
    let mut arrived = 0usize;
    let mut last_arrival = 0.0;
    let mut in_system = 0usize;
    let mut area = 0.0;
    let mut last_t = 0.0;
    let mut sojourn_sum = 0.0;

    while let Some(ev) = heap.pop() {
        area += in_system as f64 * (ev.time - last_t);
        last_t = ev.time;
        match ev.kind {
            EventKind::Arrival => {
                let c = Customer {
                    index: arrived,
                    arrived: ev.time,
                };
                arrived += 1;
                last_arrival = ev.time;
                in_system += 1;
                let station = match model.topology {
                    Topology::ScaleUp => 0,
                    Topology::ScaleOut => rng.gen_range(0..model.servers),
                };
                let st = &mut stations[station];
                match st.busy.iter().position(Option::is_none) {
                    Some(server) => {
                        st.busy[server] = Some(c);
                        let s = service_time(&mut rng);
                        push(&mut heap, ev.time + s, EventKind::Departure { station, server });
                    }
                    None => st.waiting.push_back(c),
                }
                if arrived < n_arrivals {
                    let gap = inter.sample(&mut rng);
                    push(&mut heap, ev.time + gap, EventKind::Arrival);
                }
            }
            EventKind::Departure { station, server } => {
                let st = &mut stations[station];
                let done = st.busy[server].take().expect("departure from idle server");
                in_system -= 1;
                let sojourn = ev.time - done.arrived;
                sojourn_sum += sojourn;
                if done.index >= warmup {
                    samples.push(sojourn);
                }
                if let Some(next) = st.waiting.pop_front() {
                    st.busy[server] = Some(next);
                    let s = service_time(&mut rng);
                    push(&mut heap, ev.time + s, EventKind::Departure { station, server });
                }
            }
        }
    }

    let occupancy = Occupancy {
        mean_in_system: if last_t > 0.0 { area / last_t } else { 0.0 },
        arrival_rate: if last_arrival > 0.0 {
            arrived as f64 / last_arrival
        } else {
            0.0
        },
        mean_sojourn: if arrived > 0 { sojourn_sum / arrived as f64 } else { 0.0 },
    };
    Ok((SojournStats::from_samples(&mut samples), occupancy))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ErlangC {
    /// Probability an arrival has to wait.
    pub wait_probability: f64,
    pub mean_wait: f64,
    pub mean_sojourn: f64,
}

/// Closed-form M/M/N waiting figures.
pub fn erlang_c(lambda: f64, mu: f64, servers: usize) -> Result<ErlangC, QueueingError> {
    if !(lambda > 0.0 && mu > 0.0) {
        return Err(QueueingError::InvalidRate { lambda, mu });
    }
    if servers == 0 {
        return Err(QueueingError::NoServers);
    }
    let a = lambda / mu;
    let n = servers as f64;
    let rho = a / n;
    if rho >= 1.0 {
        return Err(QueueingError::Unstable(rho));
    }
    // Erlang B by recurrence, then C from B.
    let mut b = 1.0;
    for k in 1..=servers {
        b = a * b / (k as f64 + a * b);
    }
    let c = b / (1.0 - rho * (1.0 - b));
    let mean_wait = c / (n * mu - lambda);
    Ok(ErlangC {
        wait_probability: c,
        mean_wait,
        mean_sojourn: mean_wait + 1.0 / mu,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub load: f64,
    pub topology: String,
    pub n_servers: usize,
    pub service_model: String,
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
    pub seed: u64,
}

/// Runs both topologies at every load (per-server utilization) and seed.
/// `template` supplies server count, service rate and service model.
pub fn sweep(
    template: &QueueModel,
    loads: &[f64],
    seeds: &[u64],
    n_arrivals: usize,
) -> Result<Vec<SweepRow>, QueueingError> {
    let mut rows = Vec::with_capacity(loads.len() * seeds.len() * 2);
    for &load in loads {
        for topology in [Topology::ScaleUp, Topology::ScaleOut] {
            let mut model = QueueModel::at_load(
                topology,
                template.servers,
                load,
                template.service_rate,
                template.service,
            );
            model.warmup_fraction = template.warmup_fraction;
            for &seed in seeds {
                let s = simulate(&model, n_arrivals, seed)?;
                rows.push(SweepRow {
                    load,
                    topology: topology.label(template.servers, template.service),
                    n_servers: template.servers,
                    service_model: template.service.to_string(),
                    mean: s.mean,
                    p50: s.p50,
                    p99: s.p99,
                    max: s.max,
                    seed,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
