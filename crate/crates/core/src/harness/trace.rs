use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Pareto};

use super::config::{ArrivalProcess, ExperimentConfig, SizeMix};
use crate::ring::Packet;

/// Synthetic input trace: `config.packets` packets with consecutive `seq`
/// from 0, uniform flow IDs, sizes drawn from the mix and injection times in
/// nanoseconds. Saturating runs get `t_inject = 0`; the NIC stamps the real
/// time when it installs each packet.
pub fn generate_trace(config: &ExperimentConfig) -> Vec<Packet> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.packets;
    let gap_ns = 1e9 / config.rate_pps;
    let exp = (config.arrival == ArrivalProcess::Poisson).then(|| Exp::new(1.0 / gap_ns).expect("validated rate"));
    let pareto = match config.sizes {
        SizeMix::Mixed { min, shape, .. } => Some(Pareto::new(f64::from(min), shape).expect("validated mix")),
        SizeMix::Fixed { .. } => None,
    };
    let mut t = 0.0f64;
    (0..n)
        .map(|seq| {
            let flow = rng.gen_range(0..config.flows);
            let size = match (config.sizes, &pareto) {
                (SizeMix::Fixed { bytes }, _) => bytes,
                // the tail is clipped at max, which piles mass on full-size frames
                (SizeMix::Mixed { max, .. }, Some(p)) => (p.sample(&mut rng) as u64).min(u64::from(max)) as u32,
                _ => unreachable!(),
            };
            let t_inject = match config.arrival {
                ArrivalProcess::Saturate => 0,
                ArrivalProcess::Constant => (seq as f64 * gap_ns).round() as u64,
                ArrivalProcess::Poisson => {
                    if seq > 0 {
                        t += exp.as_ref().unwrap().sample(&mut rng);
                    }
                    t.round() as u64
                }
            };
            Packet::new(seq, flow, size, t_inject)
        })
        .collect()
}

/// Rate at which back-to-back frames of `size_bytes` arrive on a link of
/// `gbps`, counting 20 bytes of preamble and inter-frame gap.
pub fn line_rate_pps(size_bytes: u32, gbps: f64) -> f64 {
    gbps * 1e9 / (f64::from(size_bytes + 20) * 8.0)
}
