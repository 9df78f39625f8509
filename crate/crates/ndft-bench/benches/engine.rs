use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use ndft_core::rng::{Stream, StreamRng};
use ndft_core::synth::{self, Partition};
use ndft_core::train::{TrainConfig, TrainMode, Trainer};
use ndft_core::{ArchConfig, DataConfig, Tape, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut StreamRng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = StreamRng::stream(1, Stream::Init);
    let x = rand_tensor(&[32, 8, 16, 16], &mut rng);
    let w = rand_tensor(&[16, 8, 3, 3], &mut rng);
    c.bench_function("conv2d_forward_b32_8to16_16x16", |b| {
        b.iter(|| {
            let tape = Tape::no_grad();
            black_box(tape.conv2d(&x, &w, 1, 1).unwrap())
        })
    });

    let xp = x.detached_clone();
    xp.set_requires_grad(true);
    let wp = w.detached_clone();
    wp.set_requires_grad(true);
    c.bench_function("conv2d_forward_backward", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let y = tape.conv2d(&xp, &wp, 1, 1).unwrap();
            let loss = tape.mean(&y).unwrap();
            tape.backward(&loss).unwrap();
            xp.zero_grad();
            wp.zero_grad();
        })
    });
}

fn bench_render(c: &mut Criterion) {
    let cfg = DataConfig::default();
    let split = synth::make_split(&cfg, 1).unwrap();
    c.bench_function("render_batch_32", |b| {
        let mut rng = StreamRng::stream(2, Stream::Data);
        b.iter(|| {
            black_box(synth::sample_batch(&cfg, &split, Partition::Train, 32, &mut rng).unwrap())
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let data = DataConfig::default();
    let arch = ArchConfig::default();
    let cfg = TrainConfig {
        mode: TrainMode::Ndft,
        pretrain_task_iters: 20,
        pretrain_head_cap: 20,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&arch, &data, &cfg).unwrap();
    trainer.pretrain().unwrap();
    c.bench_function("ndft_main_step_b32", |b| {
        b.iter(|| {
            let batch = trainer.next_batch().unwrap();
            black_box(trainer.main_step(&batch).unwrap())
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv, bench_render, bench_train_step
}
criterion_main!(benches);
