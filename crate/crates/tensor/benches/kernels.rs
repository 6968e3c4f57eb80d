//! Batched convolution throughput, rayon pool versus a single-thread pool.
//!
//! The sequential arm runs the same code inside a one-thread rayon pool;
//! building with `--no-default-features` removes rayon entirely.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pir_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn conv_step(x: &Tensor<f32>, w: &Tensor<f32>) -> f32 {
    let mut g = Graph::new();
    let xv = g.variable(x.clone());
    let wv = g.variable(w.clone());
    let y = g.conv2d(xv, wv, None, 1, 1);
    let a = g.leaky_relu(y, 0.2);
    let loss = g.mean_all(a);
    let grads = g.backward(loss);
    grads.get(wv).unwrap().data()[0]
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv3x3_fwd_bwd");
    group.sample_size(20);
    for &(res, ch) in &[(32usize, 16usize), (16, 32), (8, 64)] {
        let x = Tensor::<f32>::randn(&[8, ch, res, res], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[ch, ch, 3, 3], 0.1, &mut rng);
        let id = format!("{res}px_{ch}ch");
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", &id), &(), |b, _| {
            b.iter(|| black_box(conv_step(&x, &w)))
        });
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
            group.bench_with_input(BenchmarkId::new("sequential", &id), &(), |b, _| {
                b.iter(|| pool.install(|| black_box(conv_step(&x, &w))))
            });
        }
        #[cfg(not(feature = "parallel"))]
        group.bench_with_input(BenchmarkId::new("sequential", &id), &(), |b, _| {
            b.iter(|| black_box(conv_step(&x, &w)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv);
criterion_main!(benches);
