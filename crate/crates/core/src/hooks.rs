//! Cooperative pause points inside the concurrent receive path.
//!
//! [`RxQueue`](crate::rx::RxQueue) calls the installed [`RxHook`] at fixed
//! points of `rx_batch`. Tests and the harness use this to park a consumer
//! inside a claim window ([`StallGate`]) or to perturb scheduling
//! ([`Jitter`]).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HookPoint {
    /// After the DD scan found at least one descriptor, before the CAS.
    BeforeClaim,
    /// CAS won, nothing copied yet.
    AfterClaim,
    /// Descriptors copied and replaced, completion not yet marked.
    AfterCopy,
}

impl std::str::FromStr for HookPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "before-claim" => Ok(Self::BeforeClaim),
            "after-claim" => Ok(Self::AfterClaim),
            "after-copy" | "after-copy-before-mark-done" => Ok(Self::AfterCopy),
            other => Err(format!("unknown hook point `{other}`")),
        }
    }
}

pub trait RxHook: Send + Sync {
    fn on(&self, consumer: usize, point: HookPoint);
}

/// Runs several hooks in order.
pub struct HookChain(pub Vec<Arc<dyn RxHook>>);

impl RxHook for HookChain {
    fn on(&self, consumer: usize, point: HookPoint) {
        for h in &self.0 {
            h.on(consumer, point);
        }
    }
}

#[derive(Debug, Default)]
struct GateState {
    parked: bool,
    released: bool,
    parked_at: Option<Instant>,
}

/// Parks one consumer at the `occurrence`-th time (1-based) it reaches
/// `point`, until [`release`](Self::release) is called or the optional
/// timeout elapses.
#[derive(Debug)]
pub struct StallGate {
    consumer: usize,
    point: HookPoint,
    occurrence: u64,
    auto_release: Option<Duration>,
    seen: AtomicU64,
    state: Mutex<GateState>,
    cv: Condvar,
}

impl StallGate {
    pub fn new(consumer: usize, point: HookPoint, occurrence: u64) -> Self {
        Self {
            consumer,
            point,
            occurrence: occurrence.max(1),
            auto_release: None,
            seen: AtomicU64::new(0),
            state: Mutex::new(GateState::default()),
            cv: Condvar::new(),
        }
    }

    pub fn with_auto_release(mut self, after: Duration) -> Self {
        self.auto_release = Some(after);
        self
    }

    /// Blocks until the target consumer is parked. Returns `false` on timeout.
    pub fn wait_parked(&self, timeout: Duration) -> bool {
        let st = self.state.lock().unwrap();
        let (st, _) = self
            .cv
            .wait_timeout_while(st, timeout, |s| !s.parked && !s.released)
            .unwrap();
        st.parked
    }

    pub fn is_parked(&self) -> bool {
        self.state.lock().unwrap().parked
    }

    /// Whether the gate has already fired (parked and possibly resumed).
    pub fn has_fired(&self) -> bool {
        self.state.lock().unwrap().parked_at.is_some()
    }

    pub fn release(&self) {
        let mut st = self.state.lock().unwrap();
        st.released = true;
        self.cv.notify_all();
    }
}

impl RxHook for StallGate {
    fn on(&self, consumer: usize, point: HookPoint) {
        if consumer != self.consumer || point != self.point {
            return;
        }
        if self.seen.fetch_add(1, Ordering::AcqRel) + 1 != self.occurrence {
            return;
        }
        let mut st = self.state.lock().unwrap();
        if st.released {
            return;
        }
        st.parked = true;
        st.parked_at = Some(Instant::now());
        self.cv.notify_all();
        st = match self.auto_release {
            Some(d) => self.cv.wait_timeout_while(st, d, |s| !s.released).unwrap().0,
            None => self.cv.wait_while(st, |s| !s.released).unwrap(),
        };
        st.parked = false;
        self.cv.notify_all();
    }
}

/// Seeded random yields and short spins at every hook point.
pub struct Jitter {
    rngs: Vec<Mutex<ChaCha8Rng>>,
}

impl Jitter {
    pub fn new(consumers: usize, seed: u64) -> Self {
        Self {
            rngs: (0..consumers)
                .map(|c| Mutex::new(ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9E37_79B9))))
                .collect(),
        }
    }
}

impl RxHook for Jitter {
    fn on(&self, consumer: usize, _point: HookPoint) {
        let Some(rng) = self.rngs.get(consumer) else { return };
        let roll: u32 = rng.lock().unwrap().gen_range(0..100);
        match roll {
            0..=59 => {}
            60..=84 => std::thread::yield_now(),
            85..=97 => {
                for _ in 0..(roll * 8) {
                    std::hint::spin_loop();
                }
            }
            _ => {
                for _ in 0..4 {
                    std::thread::yield_now();
                }
            }
        }
    }
}
