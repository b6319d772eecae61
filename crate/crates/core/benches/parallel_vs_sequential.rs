//! Batch-parallel kernels and seed-parallel sweeps against the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use redistill::harness::{make_toy_dataset, paired_runs, DistillConfig, ToyExperiment};
use redistill::kernel::ops::{conv2d, conv2d_backward, ConvGeom};
use redistill::kernel::Tensor;
use redistill::par::{self, Execution};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn([32, 16, 32, 32], &mut rng);
    let w = Tensor::randn([32, 16, 3, 3], &mut rng);
    let geom = ConvGeom::new(1, 1);
    let dy = conv2d(&x, &w, None, geom).unwrap();
    let mut group = c.benchmark_group("conv3x3_batch32");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::new("forward_backward", name), |b| {
            par::set_default(mode);
            b.iter(|| {
                let y = conv2d(black_box(&x), &w, None, geom).unwrap();
                black_box(conv2d_backward(&x, &w, &dy, geom).unwrap());
                y
            })
        });
    }
    group.finish();
}

fn sweep(c: &mut Criterion) {
    let cfg = DistillConfig { epochs: 1, ..DistillConfig::default() };
    let exp = ToyExperiment::prepare(make_toy_dataset(0, 16), 4, &cfg).unwrap();
    let configs = vec![("full".to_string(), cfg.clone()), ("plain".to_string(), DistillConfig::plain().with_schedule_of(&cfg))];
    let mut group = c.benchmark_group("paired_runs_4_seeds");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(name, |b| {
            par::set_default(mode);
            b.iter(|| paired_runs(&exp, &configs, &[0, 1, 2, 3]).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, conv, sweep);
criterion_main!(benches);
