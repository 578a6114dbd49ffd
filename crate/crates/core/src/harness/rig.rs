//! Shared plumbing for both clock modes: builds the rings for a mode and
//! wraps the two receive paths behind one call.

use std::sync::Arc;

use super::config::{ExperimentConfig, Mode};
use super::HarnessError;
use crate::baseline::{ScaleOutTopology, SingleQueue};
use crate::hooks::RxHook;
use crate::mempool::{BufHandle, Mempool};
use crate::ring::{NicRing, Packet};
use crate::rx::{Claim, RxConfig, RxConsumer, RxError, RxQueue};

pub(super) enum Rig {
    Corec(Box<RxQueue>),
    Baseline(ScaleOutTopology),
}

impl Rig {
    pub fn build(config: &ExperimentConfig, hook: Option<Arc<dyn RxHook>>) -> Result<Self, HarnessError> {
        let pool = Arc::new(Mempool::new(config.pool_capacity()));
        let ring = || -> Result<Arc<NicRing>, HarnessError> {
            Ok(Arc::new(
                NicRing::new(config.ring_size, pool.clone())?.with_tail_trace(),
            ))
        };
        Ok(match config.mode {
            Mode::Corec => Rig::Corec(Box::new(RxQueue::new(
                ring()?,
                RxConfig {
                    batch_size: config.batch_size,
                    mutation: config.mutation,
                    hook,
                    trace_claims: true,
                    ..RxConfig::default()
                },
            ))),
            Mode::Baseline => {
                let rings = (0..config.threads).map(|_| ring()).collect::<Result<_, _>>()?;
                Rig::Baseline(ScaleOutTopology::from_rings(rings))
            }
        })
    }

    pub fn rings(&self) -> &[Arc<NicRing>] {
        match self {
            Rig::Corec(q) => std::slice::from_ref(q.ring()),
            Rig::Baseline(t) => t.rings(),
        }
    }

    pub fn pool(&self) -> &Arc<Mempool> {
        self.rings()[0].pool()
    }

    /// Ring the NIC would place `packet` on.
    pub fn target(&self, packet: &Packet) -> &NicRing {
        match self {
            Rig::Corec(q) => q.ring(),
            Rig::Baseline(t) => &t.rings()[t.dispatch(packet)],
        }
    }

    pub fn receivers(&self, threads: usize, batch_size: u32) -> Vec<Receiver<'_>> {
        match self {
            Rig::Corec(q) => (0..threads).map(|i| Receiver::Corec(q.consumer(i))).collect(),
            Rig::Baseline(t) => t.queues(batch_size).into_iter().map(Receiver::Baseline).collect(),
        }
    }

    /// Hands any remaining contiguous completions back to the NIC. Only
    /// useful once every consumer has stopped.
    pub fn settle(&self) -> Result<(), RxError> {
        if let Rig::Corec(q) = self {
            while q.try_release()? > 0 {}
        }
        Ok(())
    }

    pub fn read_done_quiescent(&self) -> bool {
        match self {
            Rig::Corec(q) => q.read_done_is_clear(),
            Rig::Baseline(_) => true,
        }
    }
}

pub(super) enum Receiver<'a> {
    Corec(RxConsumer<'a>),
    Baseline(SingleQueue),
}

impl Receiver<'_> {
    #[inline]
    pub fn rx(&mut self, out: &mut Vec<BufHandle>) -> Result<usize, RxError> {
        match self {
            Receiver::Corec(c) => c.rx_batch(out),
            Receiver::Baseline(q) => q.rx_batch_single(out),
        }
    }

    pub fn take_claims(&mut self) -> Vec<Claim> {
        match self {
            Receiver::Corec(c) => c.take_claims(),
            Receiver::Baseline(_) => Vec::new(),
        }
    }
}
