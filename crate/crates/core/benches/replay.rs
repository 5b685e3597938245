//! Parallel vs sequential per-example gradient replay.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metagsnr::network::{per_example_param_grads, per_example_param_grads_seq, Batch, BlockNet, NetConfig};
use metagsnr::rng::{stream_rng, Purpose, StreamKey};
use metagsnr::Tensor;
use rand::Rng;

fn make_batch(cfg: &NetConfig, b: usize) -> Batch {
    let mut rng = stream_rng(StreamKey::new(17, Purpose::DomainContent));
    let n = b * cfg.in_channels * cfg.input_hw * cfg.input_hw;
    Batch {
        images: Tensor::new(
            vec![b, cfg.in_channels, cfg.input_hw, cfg.input_hw],
            (0..n).map(|_| rng.gen::<f64>()).collect(),
        )
        .unwrap(),
        labels: (0..b).map(|i| i % cfg.num_classes).collect(),
        domain_ids: vec![0; b],
    }
}

fn bench_replay(c: &mut Criterion) {
    let cfg = NetConfig {
        input_hw: 16,
        in_channels: 3,
        widths: vec![8, 16, 16, 16],
        num_classes: 7,
    };
    let net = BlockNet::init(cfg.clone(), 0).unwrap();
    let mut group = c.benchmark_group("per_example_replay");
    group.sample_size(10);
    for &b in &[8usize, 32] {
        let batch = make_batch(&cfg, b);
        group.bench_with_input(BenchmarkId::new("default", b), &batch, |bench, batch| {
            bench.iter(|| per_example_param_grads(&net, batch).unwrap());
        });
        group.bench_with_input(BenchmarkId::new("sequential", b), &batch, |bench, batch| {
            bench.iter(|| per_example_param_grads_seq(&net, batch).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, bench_replay);
criterion_main!(benches);
