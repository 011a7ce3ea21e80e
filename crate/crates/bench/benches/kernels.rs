use std::hint::black_box;

use avflow_core::diffkit::{RngStream, Tensor, Var};
use avflow_core::ensemble::rollout_ensemble;
use avflow_core::transport::{stage1_loss, TimeSamplerConfig};
use avflow_core::velnet::{Mixing, NetConfig, NetParams};
use avflow_core::verifmetrics::{crps_eval, wasserstein1_1d, CrpsVariant, LatWeights};
use criterion::{criterion_group, criterion_main, Criterion};

fn net(channels: usize, grid: (usize, usize), mixing: Mixing) -> NetParams {
    let config = NetConfig {
        channels,
        grid,
        mixing,
        ..NetConfig::default()
    };
    let mut p = NetParams::init(config, &RngStream::new(0)).unwrap();
    let mut rng = RngStream::new(1);
    for t in p.tensors_mut() {
        *t = rng.draw_gaussian(t.shape()).scale(0.1);
    }
    p
}

fn forward(c: &mut Criterion) {
    for (name, p, b) in [
        ("forward/scalar_b32", net(1, (1, 1), Mixing::PerCellDense), 32),
        ("forward/field_4x8x16_attention_b4", net(4, (8, 16), Mixing::FullAttention), 4),
    ] {
        let [ch, h, w] = p.config().field_shape();
        let mut rng = RngStream::new(2);
        let z = Var::constant(rng.draw_gaussian(&[b, ch, h, w]));
        let x = Var::constant(rng.draw_gaussian(&[b, ch, h, w]));
        let r = Var::constant(Tensor::full(&[b], 0.2));
        let t = Var::constant(Tensor::full(&[b], 0.7));
        let bound = p.bind_constant();
        c.bench_function(name, |bench| bench.iter(|| black_box(bound.forward(&z, &r, &t, &x).unwrap())));
    }
}

fn stage1_step(c: &mut Criterion) {
    let p = net(1, (1, 1), Mixing::PerCellDense);
    let mut rng = RngStream::new(3);
    let cond = rng.draw_gaussian(&[32, 1, 1, 1]);
    let target = rng.draw_gaussian(&[32, 1, 1, 1]);
    let cfg = TimeSamplerConfig::default();
    c.bench_function("stage1/loss_jvp_backward_b32", |bench| {
        bench.iter(|| {
            let bound = p.bind_trainable();
            let (loss, _) = stage1_loss(&bound, &cond, &target, &rng, &cfg).unwrap();
            black_box(loss.backward().unwrap())
        })
    });
}

fn rollout(c: &mut Criterion) {
    let p = net(1, (1, 1), Mixing::PerCellDense);
    let x0 = Tensor::zeros(&[1, 1, 1]);
    let rng = RngStream::new(4);
    c.bench_function("rollout/k20_h10_scalar", |bench| {
        bench.iter(|| black_box(rollout_ensemble(&p, &x0, 20, 10, &rng).unwrap()))
    });
}

fn metrics(c: &mut Criterion) {
    let mut rng = RngStream::new(5);
    let ens = rng.draw_gaussian(&[8, 20, 4, 8, 16]);
    let truth = rng.draw_gaussian(&[8, 4, 8, 16]);
    let w = LatWeights::uniform(8, 16);
    c.bench_function("metrics/crps_eval_8x20x4x8x16", |bench| {
        bench.iter(|| black_box(crps_eval(&ens, &truth, &w, CrpsVariant::Paper).unwrap()))
    });
    let a = rng.draw_gaussian(&[10_000]);
    let b = rng.draw_gaussian(&[9_999]);
    c.bench_function("metrics/w1_10000_vs_9999", |bench| {
        bench.iter(|| black_box(wasserstein1_1d(a.data(), b.data()).unwrap()))
    });
}

criterion_group!(benches, forward, stage1_step, rollout, metrics);
criterion_main!(benches);
