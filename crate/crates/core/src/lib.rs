//! Concurrent, non-blocking multi-consumer packet receive over a single
//! emulated NIC descriptor ring, with the classic single-consumer driver as
//! a baseline, a queueing simulator, reordering/latency metrics and an
//! experiment harness.

pub mod baseline;
pub mod harness;
pub mod hooks;
pub mod mempool;
pub mod metrics;
pub mod queueing;
pub mod ring;
pub mod rx;

pub use baseline::{dispatch_index, ScaleOutTopology, SingleQueue};
pub use hooks::{HookPoint, Jitter, RxHook, StallGate};
pub use mempool::{BufHandle, Mempool, PoolError};
pub use metrics::{latency_analyze, reorder_analyze, LatencyReport, ReorderReport};
pub use ring::{NicRing, Packet, RingSnapshot, TransparencyViolation};
pub use rx::{id_to_slot, Claim, Mutation, RxConfig, RxConsumer, RxError, RxQueue, TransactionId};
