use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hexa_core::rng::RngStreams;
use hexa_core::tensor::kernels::gemm;
use hexa_core::{Tape, Tensor};

fn bench_gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    for n in [64usize, 128, 256] {
        let mut rng = RngStreams::new(0).stream("bench", 0, n as u64);
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        let mut out = vec![0.0f32; n * n];
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| gemm(n, n, n, a.data(), false, b.data(), false, &mut out, false))
        });
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = RngStreams::new(1).stream("bench", 0, 0);
    let x = Tensor::randn(&[32, 16, 16, 16], 1.0, &mut rng);
    let w = Tensor::randn(&[32, 16, 3, 3], 0.1, &mut rng);
    c.bench_function("conv2d forward+backward 32x16x16x16", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let vx = t.param(x.clone());
            let vw = t.param(w.clone());
            let y = t.conv2d(vx, vw, 2, 1).unwrap();
            let loss = t.sum(y);
            t.backward(loss).unwrap();
        })
    });
}

criterion_group!(benches, bench_gemm, bench_conv);
criterion_main!(benches);
