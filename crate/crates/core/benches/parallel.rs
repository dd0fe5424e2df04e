//! Parallel (rayon) versus sequential chunk evaluation of one training step.
//!
//! Run with `cargo bench --bench parallel`; the `parallel` variant uses the
//! rayon pool when the `parallel` feature is on (the default) and degrades to
//! the same sequential loop otherwise.

use criterion::{criterion_group, criterion_main, Criterion};
use featvat::autodiff::Tape;
use featvat::featio::{gen_synthetic, SyntheticConfig};
use featvat::network::{ArchConfig, Network, NetworkConfig};
use featvat::par;

fn step_grads(net: &Network, x: &featvat::autodiff::Tensor) -> f64 {
    let tape = Tape::new();
    let p = net.bind(&tape, true);
    let out = net.forward(&p, tape.constant(x.clone()), 1.0).unwrap();
    let loss = out.class_probs.log().sum();
    let g = tape.backward(loss).unwrap();
    net.collect_grads(&p, &g).iter().map(|t| t.sum()).sum()
}

fn bench(c: &mut Criterion) {
    let bench = gen_synthetic(&SyntheticConfig::default(), 0).unwrap();
    let ds = bench.source.train.normalized();
    let cfg = NetworkConfig::new(ds.dim, ds.frames, ds.num_classes, ArchConfig::default()).unwrap();
    let net = Network::init(&cfg, 1).unwrap();
    let chunks: Vec<_> = (0..8)
        .map(|c| ds.batch_tensor(&(c * 16..(c + 1) * 16).collect::<Vec<_>>()))
        .collect();
    let mut group = c.benchmark_group("step_chunks");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| par::map(&chunks, |x| step_grads(&net, x))));
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_sequential(&chunks, |x| step_grads(&net, x)))
    });
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
