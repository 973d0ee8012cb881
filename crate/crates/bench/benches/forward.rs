//! Forward-pass cost as a function of clip length. The recurrence is the
//! only part that grows with L, so time should scale close to linearly.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use actdet_core::{DetectorConfig, DetectorModel, Graph, Tensor};

fn frames(n: usize, size: usize) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n).map(|_| Tensor::from_fn(vec![1, 1, size, size], |_| rng.gen_range(0.0..1.0))).collect()
}

fn bench_forward(c: &mut Criterion) {
    let config = DetectorConfig::default();
    let model = DetectorModel::init(config.clone(), 3).unwrap();
    let mut group = c.benchmark_group("forward_clip");
    group.sample_size(10);
    for len in [8usize, 16, 32] {
        let clip = frames(len, config.input_size);
        group.bench_with_input(BenchmarkId::from_parameter(len), &clip, |b, clip| {
            b.iter(|| {
                let mut g = Graph::new();
                let nodes = model.insert_params(&mut g, false).unwrap();
                let ids: Vec<_> = clip.iter().map(|f| g.constant(f.clone())).collect();
                model.forward_clip(&mut g, &nodes, &ids, false, 0).unwrap()
            });
        });
    }
    group.finish();
}

criterion_group!(benches, bench_forward);
criterion_main!(benches);
