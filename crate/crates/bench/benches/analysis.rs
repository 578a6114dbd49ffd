use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use corec::metrics::{reorder_analyze, LatencyReport};
use corec::queueing::{simulate, QueueModel, ServiceModel, Topology};
use corec_bench::{perturbed_order, shuffled_order};

fn reorder(c: &mut Criterion) {
    let mut g = c.benchmark_group("reorder_analyze");
    for n in [10_000usize, 100_000] {
        g.throughput(Throughput::Elements(n as u64));
        let (seqs, flows) = perturbed_order(n, 64, 1);
        g.bench_with_input(BenchmarkId::new("perturbed", n), &n, |b, _| {
            b.iter(|| reorder_analyze(&seqs, &flows).unwrap())
        });
        let (seqs, flows) = shuffled_order(n, 64, 1);
        g.bench_with_input(BenchmarkId::new("shuffled", n), &n, |b, _| {
            b.iter(|| reorder_analyze(&seqs, &flows).unwrap())
        });
    }
    g.finish();
}

fn latency(c: &mut Criterion) {
    let samples: Vec<u64> = (0..100_000u64)
        .map(|i| i.wrapping_mul(2_654_435_761) % 1_000_000)
        .collect();
    c.bench_function("latency_report/100k", |b| {
        b.iter(|| LatencyReport::from_samples(samples.clone()).unwrap())
    });
}

fn queueing(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.sample_size(20);
    g.throughput(Throughput::Elements(100_000));
    for topology in [Topology::ScaleUp, Topology::ScaleOut] {
        let model = QueueModel::at_load(topology, 4, 0.9, 1.0, ServiceModel::Markovian);
        g.bench_function(topology.label(4, ServiceModel::Markovian), |b| {
            b.iter(|| simulate(&model, 100_000, 7).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, reorder, latency, queueing);
criterion_main!(benches);
