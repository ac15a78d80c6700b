use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use randreg_bench::{conv_layer, model, pair, velocity};
use randreg_core::deform::{scaling_and_squaring, SsConfig};
use randreg_core::losses::{ncc_loss, NccConfig};
use randreg_core::net::{conv3d, conv3d_backward, ModelMode};
use randreg_core::train::{backbone_step, pretrain_step, AdamState, Phase, TrainConfig};

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv3d");
    for n in [16usize, 32] {
        let (x, params, spec) = conv_layer(n, 8, 16);
        g.bench_with_input(BenchmarkId::new("forward", n), &n, |b, _| b.iter(|| conv3d(&x, &params, spec)));
        let out = conv3d(&x, &params, spec);
        g.bench_with_input(BenchmarkId::new("backward", n), &n, |b, _| {
            b.iter(|| {
                let mut grads = vec![0.0f32; params.len()];
                conv3d_backward(&x, &out, &params, spec, &mut grads, true)
            })
        });
    }
    g.finish();
}

fn integrate(c: &mut Criterion) {
    let mut g = c.benchmark_group("scaling_and_squaring");
    for n in [16usize, 32] {
        let v = velocity(n, 3);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| scaling_and_squaring(&v, SsConfig::default()))
        });
    }
    g.finish();
}

fn ncc(c: &mut Criterion) {
    let p = pair(32, 5);
    let mut g = c.benchmark_group("ncc_32");
    for w in [5usize, 9] {
        let cfg = NccConfig { window: w, epsilon: 1e-5 };
        g.bench_with_input(BenchmarkId::new("window", w), &w, |b, _| b.iter(|| ncc_loss(&p.fixed, &p.moving, &cfg)));
    }
    g.finish();
}

fn steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("training_step_16");
    g.sample_size(20);
    let p = pair(16, 9);
    let cfg = TrainConfig { phase: Phase::Pretrain, ncc_window: 5, ..TrainConfig::default() };
    let mut pre = model(ModelMode::Pretrain, 3);
    let mut adam = AdamState::new(pre.param_count(), cfg.learning_rate());
    g.bench_function("pretrain", |b| {
        b.iter(|| pretrain_step(&mut pre, &p.fixed, &p.moving, None, &cfg, &mut adam).unwrap())
    });
    let mut back = model(ModelMode::Backbone, 3);
    let mut adam = AdamState::new(back.param_count(), cfg.learning_rate());
    g.bench_function("backbone", |b| {
        b.iter(|| backbone_step(&mut back, &p.fixed, &p.moving, None, &cfg, &mut adam).unwrap())
    });
    g.finish();
}

criterion_group!(benches, conv, integrate, ncc, steps);
criterion_main!(benches);
