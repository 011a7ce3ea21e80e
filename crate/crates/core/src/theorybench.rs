//! Finite-sample checks of the rollout amplification bound and its proof
//! quantities: rectification residuals, the endpoint identity, kernel gaps,
//! sensitivity estimates, and the CRPS/W1 relation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffkit::{RngStream, Tensor, Var};
use crate::ensemble::Transition;
use crate::error::{invalid, shape_err, Error, Result};
use crate::synthworlds::{AnalyticKernel, InitialDist};
use crate::transport::{per_batch, sample_one_step, VelocityField};
use crate::verifmetrics::{crps_cell, wasserstein1_1d, wasserstein1_marginal_weighted, CrpsVariant, LatWeights};

fn check_batch(z: &Tensor, c: &Tensor, v: &Tensor, r: &[f64], t: &[f64]) -> Result<()> {
    if z.ndim() != 4 {
        return invalid(format!("residual expects (B, C, H, W) fields, got {:?}", z.shape()));
    }
    if z.shape() != c.shape() {
        return shape_err("rectification_residual", z.shape(), c.shape());
    }
    if z.shape() != v.shape() {
        return shape_err("rectification_residual", z.shape(), v.shape());
    }
    let b = z.shape()[0];
    if r.len() != b || t.len() != b {
        return invalid(format!("residual: {b} fields but {} r and {} t values", r.len(), t.len()));
    }
    Ok(())
}

fn residual_unchecked<F: VelocityField>(net: &F, z: &Tensor, r: &[f64], t: &[f64], c: &Tensor, v: &Tensor) -> Result<Tensor> {
    let b = z.shape()[0];
    let zd = Var::dual(z.clone(), v.clone())?;
    let td = Var::dual(Tensor::vector(t), Tensor::ones(&[b]))?;
    let u = net.eval(&zd, &Var::constant(Tensor::vector(r)), &td, &Var::constant(c.clone()))?;
    if u.shape() != z.shape() {
        return shape_err("rectification_residual (network output)", z.shape(), u.shape());
    }
    let gap: Vec<f64> = t.iter().zip(r).map(|(t, r)| t - r).collect();
    u.value().sub(v)?.add(&per_batch(&gap, 4).mul(&u.tangent())?)
}

/// `ρ = u(z, r, t, c) − v + (t − r)·D_t u` where `D_t u` is the directional
/// derivative along `(v, 0, 1, 0)`. Batched; needs `r < t` everywhere.
pub fn rectification_residual<F: VelocityField>(
    net: &F,
    z: &Tensor,
    r: &[f64],
    t: &[f64],
    c: &Tensor,
    v: &Tensor,
) -> Result<Tensor> {
    check_batch(z, c, v, r, t)?;
    if let Some((r, t)) = r.iter().zip(t).find(|(r, t)| r >= t) {
        return invalid(format!("rectification_residual needs r < t, got r = {r}, t = {t}"));
    }
    residual_unchecked(net, z, r, t, c, v)
}

/// Mean absolute value of each batch element of a `(B, …)` tensor.
pub fn per_sample_l1(x: &Tensor) -> Vec<f64> {
    let b = x.shape()[0];
    let per = x.numel() / b.max(1);
    x.data().chunks(per).map(|s| s.iter().map(|v| v.abs()).sum::<f64>() / per as f64).collect()
}

/// Path joining `x` to the noise used by [`endpoint_error_bound_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoupledPath {
    /// The exact probability-flow trajectory through `ε`, ending at
    /// `x = m + σε`.
    Flow,
    /// The straight line `(1−τ)x + τε` with `x = m + σε`.
    Straight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointCheck {
    /// `‖x̂ − x‖` per draw.
    pub lhs: Vec<f64>,
    /// Trapezoidal `∫₀¹ ‖ρ(z_τ, 0, τ, c)‖ dτ` per draw.
    pub rhs: Vec<f64>,
}

/// Along any differentiable path `z_τ` from `x` (τ = 0) to `ε` (τ = 1),
/// `g(τ) = z_τ − τ·u(z_τ, 0, τ, c)` moves from `x` to the one-step sample and
/// `g' = −ρ`. Compares the endpoint error with the integrated residual.
pub fn endpoint_error_bound_check<F: VelocityField>(
    net: &F,
    kernel: &AnalyticKernel,
    c: &Tensor,
    rng: &RngStream,
    n_tau: usize,
    path: CoupledPath,
) -> Result<EndpointCheck> {
    if n_tau < 2 {
        return invalid("endpoint check needs at least two τ nodes");
    }
    let AnalyticKernel::AffineGaussian { sigma, .. } = kernel else {
        return Err(Error::Unsupported("endpoint check needs the affine_gaussian path".into()));
    };
    if c.ndim() != 4 {
        return invalid(format!("endpoint check expects (B, C, H, W) conditioning, got {:?}", c.shape()));
    }
    let s2 = sigma * sigma;
    let m = kernel.affine_mean(c)?;
    let eps = rng.gaussian(c.shape()).0;
    let x = m.add(&eps.scale(*sigma))?;
    let xhat = sample_one_step(net, &eps, c)?;
    let lhs = per_sample_l1(&xhat.sub(&x)?);

    let b = c.shape()[0];
    let taus: Vec<f64> = (0..n_tau).map(|i| i as f64 / (n_tau - 1) as f64).collect();
    let mut zs = Vec::with_capacity(n_tau);
    let mut vs = Vec::with_capacity(n_tau);
    for &tau in &taus {
        let (z, v) = match path {
            CoupledPath::Flow => {
                let s = ((1.0 - tau).powi(2) * s2 + tau * tau).sqrt();
                let sdot = (tau - (1.0 - tau) * s2) / s;
                (m.scale(1.0 - tau).add(&eps.scale(s))?, m.scale(-1.0).add(&eps.scale(sdot))?)
            }
            CoupledPath::Straight => (x.scale(1.0 - tau).add(&eps.scale(tau))?, eps.sub(&x)?),
        };
        zs.push(z);
        vs.push(v);
    }
    let zcat = Tensor::concat(&zs.iter().collect::<Vec<_>>(), 0)?;
    let vcat = Tensor::concat(&vs.iter().collect::<Vec<_>>(), 0)?;
    let ccat = Tensor::concat(&vec![c; n_tau], 0)?;
    let tcat: Vec<f64> = taus.iter().flat_map(|&t| std::iter::repeat_n(t, b)).collect();
    let rho = residual_unchecked(net, &zcat, &vec![0.0; b * n_tau], &tcat, &ccat, &vcat)?;
    let norms = per_sample_l1(&rho);
    let h = 1.0 / (n_tau - 1) as f64;
    let rhs = (0..b)
        .map(|i| {
            (0..n_tau)
                .map(|j| {
                    let wgt = if j == 0 || j == n_tau - 1 { 0.5 } else { 1.0 };
                    wgt * norms[j * b + i]
                })
                .sum::<f64>()
                * h
        })
        .collect();
    Ok(EndpointCheck { lhs, rhs })
}

/// W1 between two sample sets of fields `(N, C, H, W)`: exact on the line,
/// the unweighted marginal aggregate for fields.
pub fn sample_w1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.ndim() != 4 || b.ndim() != 4 || a.shape()[1..] != b.shape()[1..] {
        return shape_err("sample_w1", a.shape(), b.shape());
    }
    if a.shape()[1..].iter().product::<usize>() == 1 {
        return wasserstein1_1d(a.data(), b.data());
    }
    wasserstein1_marginal_weighted(a, b, &LatWeights::uniform(a.shape()[2], a.shape()[3]))
}

fn replicate(c: &Tensor, n: usize) -> Result<Tensor> {
    let mut one = vec![1];
    one.extend_from_slice(c.shape());
    let mut shape = vec![n];
    shape.extend_from_slice(c.shape());
    c.reshape(&one)?.broadcast_to(&shape)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEstimate {
    pub lambda_hat: f64,
    /// Index of the maximizing probe pair; `None` when the value is exact.
    pub argmax: Option<usize>,
    pub used_pairs: usize,
}

/// `Λ̂`: exact `max|a|` for the affine world, otherwise the largest sampled
/// `Ŵ1(K(·|c), K(·|c')) / ‖c − c'‖` over the probe pairs of unbatched fields.
/// Both sides of a pair share their noise draws.
pub fn estimate_sensitivity(
    kernel: &AnalyticKernel,
    probes: &[(Tensor, Tensor)],
    n_samples: usize,
    rng: &RngStream,
) -> Result<SensitivityEstimate> {
    if probes.is_empty() {
        return invalid("estimate_sensitivity needs at least one probe pair");
    }
    if let AnalyticKernel::AffineGaussian { .. } = kernel {
        return Ok(SensitivityEstimate {
            lambda_hat: kernel.lipschitz()?,
            argmax: None,
            used_pairs: probes.len(),
        });
    }
    if n_samples == 0 {
        return invalid("estimate_sensitivity needs n_samples ≥ 1");
    }
    let ratios: Vec<Option<f64>> = probes
        .par_iter()
        .enumerate()
        .map(|(i, (c, c2))| {
            if c.shape() != c2.shape() {
                return shape_err("estimate_sensitivity probe", c.shape(), c2.shape());
            }
            let dist = c.sub(c2)?.data().iter().map(|d| d.abs()).sum::<f64>() / c.numel() as f64;
            if dist == 0.0 {
                return Ok(None);
            }
            let s = rng.child(i as u64);
            let a = kernel.sample(&replicate(c, n_samples)?, &s)?.0;
            let b = kernel.sample(&replicate(c2, n_samples)?, &s)?.0;
            Ok(Some(sample_w1(&a, &b)? / dist))
        })
        .collect::<Result<_>>()?;
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in ratios.iter().enumerate() {
        if let Some(r) = r {
            if best.is_none_or(|(_, b)| *r > b) {
                best = Some((i, *r));
            }
        }
    }
    let (argmax, lambda_hat) = best.ok_or_else(|| Error::InvalidArgument("every probe pair is coincident".into()))?;
    Ok(SensitivityEstimate {
        lambda_hat,
        argmax: Some(argmax),
        used_pairs: ratios.iter().filter(|r| r.is_some()).count(),
    })
}

/// `Ŵ1` between `n_samples` one-step model draws and as many exact kernel
/// draws at the unbatched state `c`.
pub fn kernel_gap<M: Transition>(
    model: &M,
    kernel: &AnalyticKernel,
    c: &Tensor,
    n_samples: usize,
    rng: &RngStream,
) -> Result<f64> {
    if n_samples < 100 {
        return invalid(format!("kernel_gap needs n_samples ≥ 100, got {n_samples}"));
    }
    let reps = replicate(c, n_samples)?;
    let a = model.step(&reps, &rng.child_named("model"))?;
    let b = kernel.step(&reps, &rng.child_named("kernel"))?;
    sample_w1(&a, &b)
}

/// `Ŵ1` between two independent exact sample sets of size `n` at `c`.
pub fn self_distance_floor(kernel: &AnalyticKernel, c: &Tensor, n: usize, rng: &RngStream) -> Result<f64> {
    let reps = replicate(c, n)?;
    let a = kernel.step(&reps, &rng.child(0))?;
    let b = kernel.step(&reps, &rng.child(1))?;
    sample_w1(&a, &b)
}

const CHAIN_CHUNK: usize = 256;

/// Rolls `x0` (`(N, C, H, W)`) forward `h` steps; chunk `i` of step `j`
/// draws from `rng.child(i).child(j)`. Returns states at steps `0..=h`.
pub fn simulate_chains<M: Transition + ?Sized>(model: &M, x0: &Tensor, h: usize, rng: &RngStream) -> Result<Vec<Tensor>> {
    let n = x0.shape()[0];
    let starts: Vec<usize> = (0..n).step_by(CHAIN_CHUNK).collect();
    let chunks: Vec<Vec<Tensor>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let len = CHAIN_CHUNK.min(n - s);
            let s_rng = rng.child(i as u64);
            let mut x = x0.slice_axis(0, s, len)?;
            let mut out = vec![x.clone()];
            for j in 1..=h {
                x = model.step(&x, &s_rng.child(j as u64))?;
                out.push(x.clone());
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    (0..=h)
        .map(|j| Tensor::concat(&chunks.iter().map(|c| &c[j]).collect::<Vec<_>>(), 0))
        .collect()
}

/// `R_h = Λ·R_{h−1} + g_{h−1}` with `R_0 = 0`, for `h = 1..=gaps.len()`.
pub fn bound_recursion(gaps: &[f64], lambda: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(gaps.len());
    let mut r = 0.0;
    for g in gaps {
        r = lambda * r + g;
        out.push(r);
    }
    out
}

/// `R_h = Σ_{j<h} Λ^{h−1−j} g_j`.
pub fn bound_closed_sum(gaps: &[f64], lambda: f64) -> Vec<f64> {
    (1..=gaps.len())
        .map(|h| (0..h).map(|j| lambda.powi((h - 1 - j) as i32) * gaps[j]).sum())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundOptions {
    /// Chains per law.
    pub n_samples: usize,
    /// Visited states per step at which the kernel gap is estimated.
    pub gap_states: usize,
    /// Draws per kernel-gap estimate.
    pub gap_samples: usize,
    /// Probe pairs for `Λ̂` on non-affine worlds.
    pub probes: usize,
    pub probe_delta: f64,
    pub probe_samples: usize,
    /// Slack as a multiple of the measured self-distance floor.
    pub slack_factor: f64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        BoundOptions {
            n_samples: 10_000,
            gap_states: 32,
            gap_samples: 1_000,
            probes: 64,
            probe_delta: 1e-3,
            probe_samples: 200,
            slack_factor: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub h: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub lambda_hat: f64,
    /// Mean kernel gap over states visited at step `h − 1`.
    pub mean_gap: f64,
    pub floor: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub rows: Vec<BoundRow>,
    pub lambda_hat: f64,
    pub options: BoundOptions,
    /// Marginal W1 was used on a field world.
    pub proxy: bool,
    /// `max_h |recursion − closed sum|`.
    pub recursion_mismatch: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.rows.iter().all(|r| r.holds)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("h,lhs,rhs,lambda_hat,mean_gap,floor,holds\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.11e},{:.11e},{:.11e},{:.11e},{:.11e},{}\n",
                r.h, r.lhs, r.rhs, r.lambda_hat, r.mean_gap, r.floor, r.holds
            ));
        }
        s
    }
}

/// Simulates true and model rollouts from shared initial draws and checks
/// `Ŵ1(μ_h^θ, μ_h⋆) ≤ Σ_{j<h} Λ̂^{h−1−j} ḡ_j + slack_h` for `h = 1..=H`,
/// where `ḡ_j` is the mean kernel gap over model states visited at step `j`
/// and `slack_h` is a multiple of the Ŵ1 between two independent true
/// rollout sets at step `h`.
#[allow(clippy::too_many_arguments)]
pub fn verify_rollout_bound<M: Transition>(
    model: &M,
    kernel: &AnalyticKernel,
    initial: &InitialDist,
    field: [usize; 3],
    horizon: usize,
    opts: &BoundOptions,
    rng: &RngStream,
) -> Result<BoundReport> {
    if horizon == 0 {
        return invalid("verify_rollout_bound needs H ≥ 1");
    }
    if opts.n_samples == 0 || opts.gap_states == 0 {
        return invalid("verify_rollout_bound needs n_samples ≥ 1 and gap_states ≥ 1");
    }
    let n = opts.n_samples;
    let shape = [n, field[0], field[1], field[2]];
    let x0 = initial.sample(&shape, &rng.child_named("initial")).0;
    let x0_ref = initial.sample(&shape, &rng.child_named("initial-ref")).0;
    let truth = simulate_chains(kernel, &x0, horizon, &rng.child_named("true"))?;
    let truth_ref = simulate_chains(kernel, &x0_ref, horizon, &rng.child_named("true-ref"))?;
    let modeled = simulate_chains(model, &x0, horizon, &rng.child_named("model"))?;

    let lambda_hat = match kernel {
        AnalyticKernel::AffineGaussian { .. } => kernel.lipschitz()?,
        _ => {
            let stride = (n / opts.probes.max(1)).max(1);
            let mut probes = Vec::new();
            for j in 0..=horizon {
                for i in (0..n).step_by(stride).take(opts.probes) {
                    let s = truth[j].slice_axis(0, i, 1)?;
                    let c = s.reshape(&s.shape()[1..])?;
                    let c2 = c.map(|x| x + opts.probe_delta);
                    probes.push((c, c2));
                }
            }
            estimate_sensitivity(kernel, &probes, opts.probe_samples, &rng.child_named("probes"))?.lambda_hat
        }
    };

    let gap_rng = rng.child_named("gaps");
    let stride = (n / opts.gap_states).max(1);
    let mut gaps = Vec::with_capacity(horizon);
    for (j, states) in modeled.iter().take(horizon).enumerate() {
        let idx: Vec<usize> = (0..n).step_by(stride).take(opts.gap_states).collect();
        let vals: Vec<f64> = idx
            .par_iter()
            .map(|&i| {
                let s = states.slice_axis(0, i, 1)?;
                let c = s.reshape(&s.shape()[1..])?;
                kernel_gap(model, kernel, &c, opts.gap_samples, &gap_rng.child(j as u64).child(i as u64))
            })
            .collect::<Result<_>>()?;
        gaps.push(vals.iter().sum::<f64>() / vals.len() as f64);
    }
    let rhs = bound_recursion(&gaps, lambda_hat);
    let closed = bound_closed_sum(&gaps, lambda_hat);
    let recursion_mismatch = rhs.iter().zip(&closed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut rows = Vec::with_capacity(horizon);
    for h in 1..=horizon {
        let lhs = sample_w1(&modeled[h], &truth[h])?;
        let floor = sample_w1(&truth[h], &truth_ref[h])?;
        rows.push(BoundRow {
            h,
            lhs,
            rhs: rhs[h - 1],
            lambda_hat,
            mean_gap: gaps[h - 1],
            floor,
            holds: lhs <= rhs[h - 1] + opts.slack_factor * floor,
        });
    }
    Ok(BoundReport {
        rows,
        lambda_hat,
        options: opts.clone(),
        proxy: field.iter().product::<usize>() > 1,
        recursion_mismatch,
    })
}

/// CRPS with coefficient 1/(2K²) of `members` against `y` and the W1 distance from the
/// members to the point mass at `y`.
pub fn crps_w1_relation_check(members: &[f64], y: f64) -> Result<(f64, f64)> {
    if members.is_empty() {
        return invalid("crps_w1_relation_check needs members");
    }
    let crps = crps_cell(members, y, CrpsVariant::Paper)?;
    let w1 = wasserstein1_1d(members, &vec![y; members.len()])?;
    Ok((crps, w1))
}
