use avflow_core::diffkit::{RngStream, Tensor, Var};
use avflow_core::ensemble::ModelKernel;
use avflow_core::synthworlds::{AffineOracle, AnalyticKernel, InitialDist, NormStats};
use avflow_core::theorybench::{
    bound_closed_sum, bound_recursion, crps_w1_relation_check, endpoint_error_bound_check, estimate_sensitivity,
    kernel_gap, rectification_residual, self_distance_floor, verify_rollout_bound, BoundOptions, CoupledPath,
};
use avflow_core::transport::{FieldFn, ZeroField};
use avflow_core::velnet::{Mixing, NetConfig, NetParams};
use proptest::prelude::*;

fn scalar(v: f64) -> Tensor {
    Tensor::new(vec![1, 1, 1, 1], vec![v]).unwrap()
}

fn unbatched(v: f64) -> Tensor {
    Tensor::new(vec![1, 1, 1], vec![v]).unwrap()
}

fn tiny() -> NetConfig {
    NetConfig {
        channels: 1,
        grid: (1, 1),
        hidden_dim: 8,
        depth: 1,
        embed_dim: 8,
        mixing: Mixing::PerCellDense,
        attention_heads: 2,
        ffn_mult: 2,
        time_scale: 1000.0,
    }
}

fn randomized(seed: u64, scale: f64) -> NetParams {
    let mut p = NetParams::init(tiny(), &RngStream::new(seed)).unwrap();
    let mut rng = RngStream::new(seed).child_named("perturb");
    for t in p.tensors_mut() {
        *t = rng.draw_gaussian(t.shape()).scale(scale);
    }
    p
}

#[test]
fn oracle_residual_vanishes() {
    let kernel = AnalyticKernel::AffineGaussian {
        gain: vec![0.8, -0.5],
        bias: 0.3,
        sigma: 0.4,
    };
    let oracle = AffineOracle::new(&kernel).unwrap();
    let mut rng = RngStream::new(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let z = rng.draw_gaussian(&[2, 3, 2]).scale(2.0);
        let c = rng.draw_gaussian(&[2, 3, 2]).scale(2.0);
        let u = rng.draw_uniforms(2);
        let (r, t) = (u[0].min(u[1]), u[0].max(u[1]));
        let v = oracle.instantaneous(&z, t, &c).unwrap();
        let b = |x: &Tensor| x.reshape(&[1, 2, 3, 2]).unwrap();
        let rho = rectification_residual(&oracle, &b(&z), &[r], &[t], &b(&c), &b(&v)).unwrap();
        worst = worst.max(rho.data().iter().fold(0.0, |m, x| m.max(x.abs())));
    }
    assert!(worst <= 1e-8, "max residual {worst}");
}

#[test]
fn zero_net_residual_is_minus_v() {
    let mut rng = RngStream::new(2);
    let z = rng.draw_gaussian(&[3, 1, 2, 2]);
    let c = rng.draw_gaussian(&[3, 1, 2, 2]);
    let v = rng.draw_gaussian(&[3, 1, 2, 2]);
    let rho = rectification_residual(&ZeroField, &z, &[0.1, 0.0, 0.5], &[0.2, 1.0, 0.9], &c, &v).unwrap();
    assert_eq!(rho.data(), v.scale(-1.0).data());
}

#[test]
fn linear_net_hand_value() {
    let net = FieldFn(|z: &Var, _: &Var, _: &Var, _: &Var| Ok(z.clone()));
    let rho = rectification_residual(&net, &scalar(1.0), &[0.3], &[0.8], &scalar(0.0), &scalar(2.0)).unwrap();
    assert!(rho.item().unwrap().abs() < 1e-15);
}

#[test]
fn residual_needs_r_below_t() {
    let z = scalar(1.0);
    assert!(rectification_residual(&ZeroField, &z, &[0.5], &[0.5], &z, &z).is_err());
    assert!(rectification_residual(&ZeroField, &z, &[0.6], &[0.5], &z, &z).is_err());
}

#[test]
fn endpoint_identity_examples() {
    let kernel = AnalyticKernel::affine(0.8, 0.5, 0.3);
    let oracle = AffineOracle::new(&kernel).unwrap();
    let c = RngStream::new(3).gaussian(&[20, 1, 1, 1]).0;
    let rng = RngStream::new(4);

    let chk = endpoint_error_bound_check(&oracle, &kernel, &c, &rng, 33, CoupledPath::Flow).unwrap();
    assert!(chk.lhs.iter().chain(&chk.rhs).all(|v| *v <= 1e-6), "{chk:?}");

    let chk = endpoint_error_bound_check(&ZeroField, &kernel, &c, &rng, 5, CoupledPath::Straight).unwrap();
    for (l, r) in chk.lhs.iter().zip(&chk.rhs) {
        assert!((l - r).abs() <= 1e-12 * (1.0 + l));
    }
    let chk = endpoint_error_bound_check(&ZeroField, &kernel, &c, &rng, 101, CoupledPath::Flow).unwrap();
    for (l, r) in chk.lhs.iter().zip(&chk.rhs) {
        assert!(*l <= r * 1.05);
    }
    assert!(endpoint_error_bound_check(&ZeroField, &kernel, &c, &rng, 1, CoupledPath::Flow).is_err());
}

#[test]
fn endpoint_bound_for_generic_net() {
    let kernel = AnalyticKernel::affine(0.8, 0.0, 0.3);
    let net = randomized(5, 0.3);
    let c = RngStream::new(6).gaussian(&[100, 1, 1, 1]).0;
    for path in [CoupledPath::Flow, CoupledPath::Straight] {
        let chk = endpoint_error_bound_check(&net, &kernel, &c, &RngStream::new(7), 201, path).unwrap();
        for (l, r) in chk.lhs.iter().zip(&chk.rhs) {
            assert!(*l <= r * 1.05, "{l} > {r}");
        }
    }
}

#[test]
fn sensitivity_examples() {
    let probes = vec![(unbatched(0.0), unbatched(1.0)), (unbatched(2.0), unbatched(-1.0))];
    let s = estimate_sensitivity(&AnalyticKernel::affine(0.8, 0.0, 0.3), &probes, 100, &RngStream::new(0)).unwrap();
    assert_eq!(s.lambda_hat, 0.8);
    let s = estimate_sensitivity(&AnalyticKernel::affine(0.0, 1.0, 0.3), &probes, 100, &RngStream::new(0)).unwrap();
    assert_eq!(s.lambda_hat, 0.0);

    let chaotic = AnalyticKernel::chaotic(1.05, 0.3, 1.0, 0.2);
    let probes: Vec<(Tensor, Tensor)> = (-20..=20)
        .map(|i| {
            let x = i as f64 * 0.3;
            (unbatched(x), unbatched(x + 1e-3))
        })
        .chain(std::iter::once((unbatched(1.0), unbatched(1.0))))
        .collect();
    let s = estimate_sensitivity(&chaotic, &probes, 500, &RngStream::new(1)).unwrap();
    assert!((1.0..=1.35).contains(&s.lambda_hat), "{}", s.lambda_hat);
    assert_eq!(s.used_pairs, probes.len() - 1);

    let coincident = vec![(unbatched(1.0), unbatched(1.0))];
    assert!(estimate_sensitivity(&chaotic, &coincident, 100, &RngStream::new(0)).is_err());
    assert!(estimate_sensitivity(&chaotic, &[], 100, &RngStream::new(0)).is_err());
}

#[test]
fn kernel_gap_examples() {
    let kernel = AnalyticKernel::affine(0.8, 0.0, 0.3);
    let oracle = AffineOracle::new(&kernel).unwrap();
    let model = ModelKernel::new(&oracle, NormStats::identity(1));
    let n = 2000;
    let mut gaps = 0.0;
    let mut floors = 0.0;
    for i in 0..10 {
        let c = unbatched(i as f64 * 0.4 - 2.0);
        gaps += kernel_gap(&model, &kernel, &c, n, &RngStream::new(i)).unwrap();
        floors += self_distance_floor(&kernel, &c, n, &RngStream::new(100 + i)).unwrap();
    }
    assert!(gaps <= 2.0 * floors, "{gaps} vs floor {floors}");

    let unit = AnalyticKernel::affine(1.0, 0.0, 1.0);
    let fresh = NetParams::init(tiny(), &RngStream::new(0)).unwrap();
    let model = ModelKernel::new(&fresh, NormStats::identity(1));
    for m in [0.0, 0.5, 2.0] {
        let g = kernel_gap(&model, &unit, &unbatched(m), 10_000, &RngStream::new(3)).unwrap();
        assert!(g >= 0.0);
        assert!((g - m).abs() < 0.05, "m = {m}: gap {g}");
    }
    assert!(kernel_gap(&model, &unit, &unbatched(0.0), 99, &RngStream::new(3)).is_err());
}

#[test]
fn self_distance_floor_shrinks() {
    let kernel = AnalyticKernel::chaotic(1.05, 0.3, 1.0, 0.2);
    let c = unbatched(0.5);
    let floors: Vec<f64> = [100, 1000, 10_000]
        .iter()
        .map(|&n| {
            (0..5)
                .map(|s| self_distance_floor(&kernel, &c, n, &RngStream::new(s)).unwrap())
                .sum::<f64>()
                / 5.0
        })
        .collect();
    assert!(floors[0] > floors[1] && floors[1] > floors[2], "{floors:?}");
}

#[test]
fn oracle_rollouts_stay_within_the_floor() {
    let kernel = AnalyticKernel::affine(0.8, 0.5, 0.3);
    let oracle = AffineOracle::new(&kernel).unwrap();
    let model = ModelKernel::new(&oracle, NormStats::identity(1));
    let opts = BoundOptions {
        n_samples: 4000,
        gap_states: 8,
        gap_samples: 500,
        ..BoundOptions::default()
    };
    let initial = InitialDist::Gaussian { mean: 0.0, std: 1.0 };
    let rep = verify_rollout_bound(&model, &kernel, &initial, [1, 1, 1], 5, &opts, &RngStream::new(2)).unwrap();
    assert_eq!(rep.rows.len(), 5);
    assert_eq!(rep.lambda_hat, 0.8);
    assert!(rep.holds());
    assert!(rep.recursion_mismatch <= 1e-12);
    assert!(!rep.proxy);
    for r in &rep.rows {
        assert!(r.lhs <= 3.0 * r.floor, "{r:?}");
        assert!(r.lhs >= 0.0 && r.rhs >= 0.0 && r.floor >= 0.0 && r.mean_gap >= 0.0);
    }
    let first = &rep.rows[0];
    assert!((first.lhs - first.mean_gap).abs() <= 3.0 * first.floor);
    let csv = rep.to_csv();
    assert!(csv.starts_with("h,lhs,rhs,lambda_hat,mean_gap,floor,holds\n"));
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn crps_w1_relation_examples() {
    let (c, w) = crps_w1_relation_check(&[1.3, 1.3, 1.3], 0.3).unwrap();
    assert!((c - 1.0).abs() < 1e-15 && (w - 1.0).abs() < 1e-15);
    let (c, w) = crps_w1_relation_check(&[0.0, 2.0], 1.0).unwrap();
    assert_eq!((c, w), (0.5, 1.0));
    let draws = RngStream::new(11).normals(10_000).0;
    let (c, w) = crps_w1_relation_check(&draws, 0.0).unwrap();
    assert!((c - 0.23370).abs() < 0.02, "{c}");
    assert!((w - 0.79788).abs() < 0.02, "{w}");
    assert!(crps_w1_relation_check(&[], 0.0).is_err());
}

proptest! {
    #[test]
    fn recursion_matches_closed_sum(gaps in prop::collection::vec(0.0f64..2.0, 1..12), lambda in 0.0f64..1.6) {
        let a = bound_recursion(&gaps, lambda);
        let b = bound_closed_sum(&gaps, lambda);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
        if lambda >= 1.0 {
            prop_assert!(a.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn crps_never_exceeds_w1_to_point(xs in prop::collection::vec(-5.0f64..5.0, 1..9), y in -5.0f64..5.0) {
        let (c, w) = crps_w1_relation_check(&xs, y).unwrap();
        prop_assert!(c <= w + 1e-12);
        let degenerate = xs.iter().all(|x| *x == xs[0]);
        prop_assert_eq!(degenerate, (w - c).abs() <= 1e-12);
    }
}
