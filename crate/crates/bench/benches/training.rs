use criterion::{criterion_group, criterion_main, Criterion};
use hexa_core::moco::{moco_step, BatchIndex, MocoConfig, MocoState};
use hexa_core::nn::{BnMode, BnUsage, EncoderConfig, EncoderOutput, EncoderParams};
use hexa_core::rng::RngStreams;
use hexa_core::{Scheme, Tape, Tensor};

fn batch(n: usize) -> Tensor {
    Tensor::uniform(&[n, 3, 32, 32], 0.0, 1.0, &mut RngStreams::new(2).stream("bench", 0, 0))
}

fn bench_encoder(c: &mut Criterion) {
    let enc = EncoderParams::init(EncoderConfig::default(), &mut RngStreams::new(0).stream("init", 0, 0)).unwrap();
    let x = batch(64);
    c.bench_function("encoder forward+backward B=64", |bench| {
        bench.iter(|| {
            let mut e = enc.clone();
            let mut tape = Tape::new();
            let bound = e.bind(&mut tape, true);
            let vx = tape.constant(x.clone());
            let z = e
                .forward(&mut tape, &bound, vx, BnMode::Clean, BnUsage::training(true), EncoderOutput::Latent)
                .unwrap();
            let loss = tape.sum(z);
            tape.backward(loss).unwrap();
        })
    });
    c.bench_function("encoder eval latents B=64", |bench| bench.iter(|| enc.eval_latents(&x).unwrap()));
}

fn bench_moco_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("moco step B=64");
    g.sample_size(10);
    let x = batch(64);
    let ids: Vec<usize> = (0..64).collect();
    for scheme in [Scheme::STD, Scheme::ADV_CMX] {
        let cfg = MocoConfig {
            scheme,
            ..MocoConfig::default()
        };
        let mut state = MocoState::new(cfg, 0).unwrap();
        g.bench_function(scheme.to_string(), |bench| {
            bench.iter(|| moco_step(&mut state, &x, BatchIndex { ids: &ids, epoch: 0, step: 0 }, 0.01).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_encoder, bench_moco_step);
criterion_main!(benches);
