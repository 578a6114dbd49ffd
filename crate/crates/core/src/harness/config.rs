use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hooks::HookPoint;
use crate::rx::{Mutation, DEFAULT_BATCH_SIZE, DEFAULT_RING_SIZE};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// One shared ring, every thread calls the concurrent `rx_batch`.
    #[default]
    Corec,
    /// One ring per thread, flows hashed across rings.
    Baseline,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Corec => "corec",
            Mode::Baseline => "baseline",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArrivalProcess {
    #[default]
    Poisson,
    Constant,
    /// The NIC keeps the ring topped up and waits instead of dropping.
    Saturate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SizeMix {
    Fixed {
        bytes: u32,
    },
    /// Truncated Pareto over `[min, max]` bytes.
    Mixed {
        min: u32,
        max: u32,
        shape: f64,
    },
}

impl Default for SizeMix {
    fn default() -> Self {
        SizeMix::Fixed { bytes: 64 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ServiceMode {
    /// Busy-wait on the consumer's own core.
    #[default]
    Spin,
    /// Sleep for the batch's service time, as if the work ran elsewhere.
    Hold,
}

/// Synthetic per-packet work: `base_ns + per_byte_ns * size`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceCost {
    pub base_ns: f64,
    pub per_byte_ns: f64,
    pub mode: ServiceMode,
}

impl ServiceCost {
    #[inline]
    pub fn nanos(&self, size_bytes: u32) -> u64 {
        (self.base_ns + self.per_byte_ns * f64::from(size_bytes))
            .round()
            .max(0.0) as u64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClockMode {
    /// Deterministic virtual time; consumers are interleaved on one thread.
    #[default]
    Simulated,
    /// Real threads, real time.
    WallClock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StallPlan {
    pub thread: usize,
    pub point: HookPoint,
    /// Which visit of `point` parks the thread, starting at 1.
    #[serde(default = "one")]
    pub occurrence: u64,
    /// `None` holds the thread until the run stops.
    #[serde(default)]
    pub duration_ms: Option<u64>,
}

fn one() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub threads: usize,
    pub ring_size: u32,
    pub batch_size: u32,
    /// Buffers in the shared pool; defaults to four per descriptor.
    pub pool_capacity: Option<usize>,
    pub arrival: ArrivalProcess,
    /// Mean offered load in packets per second. Ignored when saturating.
    pub rate_pps: f64,
    pub sizes: SizeMix,
    pub flows: u32,
    pub service: ServiceCost,
    pub packets: u64,
    pub clock: ClockMode,
    /// Fixed cost of every poll, simulated clock only.
    pub poll_cost_ns: u64,
    pub stall: Option<StallPlan>,
    /// Seeded random yields inside `rx_batch`, wall clock only.
    pub jitter: bool,
    pub seed: u64,
    pub mutation: Mutation,
    pub timeout_ms: u64,
    /// Wall clock: stop once nothing has been delivered for this long after
    /// the NIC finished.
    pub idle_ms: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Corec,
            threads: 1,
            ring_size: DEFAULT_RING_SIZE,
            batch_size: DEFAULT_BATCH_SIZE,
            pool_capacity: None,
            arrival: ArrivalProcess::Poisson,
            rate_pps: 1_000_000.0,
            sizes: SizeMix::default(),
            flows: 64,
            service: ServiceCost {
                base_ns: 200.0,
                per_byte_ns: 0.0,
                mode: ServiceMode::Spin,
            },
            packets: 100_000,
            clock: ClockMode::Simulated,
            poll_cost_ns: 20,
            stall: None,
            jitter: false,
            seed: 1,
            mutation: Mutation::None,
            timeout_ms: 60_000,
            idle_ms: 200,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("threads must be at least 1")]
    NoThreads,
    #[error("ring size {0} is not a power of two >= 2")]
    RingSize(u32),
    #[error("batch size {batch} must be in 1..={ring}")]
    BatchSize { batch: u32, ring: u32 },
    #[error("pool of {capacity} buffers cannot populate {needed} descriptors plus one batch per thread")]
    PoolTooSmall { capacity: usize, needed: usize },
    #[error("rate must be positive and finite, got {0}")]
    Rate(f64),
    #[error("invalid packet size mix: {0}")]
    Sizes(String),
    #[error("flows must be at least 1")]
    NoFlows,
    #[error("stall thread {thread} out of range for {threads} threads")]
    StallThread { thread: usize, threads: usize },
    #[error("stall point {0:?} has no outstanding claim; use after-claim or after-copy")]
    StallPoint(HookPoint),
    #[error("{0} requires the wall clock")]
    NeedsWallClock(&'static str),
    #[error("{0} applies to corec mode only")]
    CorecOnly(&'static str),
    #[error("service cost must be non-negative")]
    Service,
}

impl ExperimentConfig {
    pub fn rings(&self) -> usize {
        match self.mode {
            Mode::Corec => 1,
            Mode::Baseline => self.threads,
        }
    }

    pub fn pool_capacity(&self) -> usize {
        self.pool_capacity.unwrap_or(self.rings() * self.ring_size as usize * 4)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.threads == 0 {
            return Err(ConfigError::NoThreads);
        }
        if !self.ring_size.is_power_of_two() || self.ring_size < 2 {
            return Err(ConfigError::RingSize(self.ring_size));
        }
        if self.batch_size == 0 || self.batch_size > self.ring_size {
            return Err(ConfigError::BatchSize {
                batch: self.batch_size,
                ring: self.ring_size,
            });
        }
        let needed = self.rings() * self.ring_size as usize + self.threads * self.batch_size as usize;
        if self.pool_capacity() < needed {
            return Err(ConfigError::PoolTooSmall {
                capacity: self.pool_capacity(),
                needed,
            });
        }
        if self.arrival != ArrivalProcess::Saturate && !(self.rate_pps.is_finite() && self.rate_pps > 0.0) {
            return Err(ConfigError::Rate(self.rate_pps));
        }
        match self.sizes {
            SizeMix::Fixed { bytes: 0 } => return Err(ConfigError::Sizes("zero-byte packets".into())),
            SizeMix::Mixed { min, max, shape } if min == 0 || max < min || shape.is_nan() || shape <= 0.0 => {
                return Err(ConfigError::Sizes(format!("min={min} max={max} shape={shape}")));
            }
            _ => {}
        }
        if self.flows == 0 {
            return Err(ConfigError::NoFlows);
        }
        if self.service.base_ns < 0.0 || self.service.per_byte_ns < 0.0 {
            return Err(ConfigError::Service);
        }
        if let Some(s) = &self.stall {
            if s.thread >= self.threads {
                return Err(ConfigError::StallThread {
                    thread: s.thread,
                    threads: self.threads,
                });
            }
            if s.point == HookPoint::BeforeClaim {
                return Err(ConfigError::StallPoint(s.point));
            }
            if self.mode != Mode::Corec {
                return Err(ConfigError::CorecOnly("stall plans"));
            }
            if self.clock != ClockMode::WallClock {
                return Err(ConfigError::NeedsWallClock("stall plans"));
            }
        }
        if self.mutation != Mutation::None && self.mode != Mode::Corec {
            return Err(ConfigError::CorecOnly("mutations"));
        }
        if self.jitter && self.clock != ClockMode::WallClock {
            return Err(ConfigError::NeedsWallClock("jitter"));
        }
        Ok(())
    }
}
