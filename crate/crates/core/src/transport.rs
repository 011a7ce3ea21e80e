//! Linear probability path, flow-time sampling, the JVP-rectified
//! average-velocity target, the Stage-I loss, and the samplers.
//!
//! Fields are batched throughout: states and conditioning are
//! `(B, C, H, W)` tensors, flow times are `(B)` vectors.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::diffkit::sigmoid;
use crate::diffkit::{RngStream, Tensor, Var};
use crate::error::{invalid, shape_err, Result};

/// A map `(z, r, t, c) ↦ u` on batched fields.
pub trait VelocityField {
    fn eval(&self, z: &Var, r: &Var, t: &Var, c: &Var) -> Result<Var>;
}

impl<T: VelocityField + ?Sized> VelocityField for &T {
    fn eval(&self, z: &Var, r: &Var, t: &Var, c: &Var) -> Result<Var> {
        (**self).eval(z, r, t, c)
    }
}

/// Adapter turning a closure into a [`VelocityField`].
pub struct FieldFn<F>(pub F);

impl<F> VelocityField for FieldFn<F>
where
    F: Fn(&Var, &Var, &Var, &Var) -> Result<Var>,
{
    fn eval(&self, z: &Var, r: &Var, t: &Var, c: &Var) -> Result<Var> {
        (self.0)(z, r, t, c)
    }
}

/// The identically zero field.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroField;

impl VelocityField for ZeroField {
    fn eval(&self, z: &Var, _r: &Var, _t: &Var, _c: &Var) -> Result<Var> {
        Ok(Var::constant(Tensor::zeros(z.shape())))
    }
}

/// Counts network evaluations, one per batch element.
pub struct Counted<F> {
    inner: F,
    count: AtomicU64,
}

impl<F> Counted<F> {
    pub fn new(inner: F) -> Self {
        Counted {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn nfe(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.count.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }
}

impl<F: VelocityField> VelocityField for Counted<F> {
    fn eval(&self, z: &Var, r: &Var, t: &Var, c: &Var) -> Result<Var> {
        self.count.fetch_add(z.shape()[0] as u64, Ordering::Relaxed);
        self.inner.eval(z, r, t, c)
    }
}

/// `(z_t, v_t)` with `z_t = (1−t)·target + t·noise` and `v_t = noise − target`.
pub fn sample_path(target: &Tensor, noise: &Tensor, t: f64) -> Result<(Tensor, Tensor)> {
    if target.shape() != noise.shape() {
        return shape_err("sample_path", target.shape(), noise.shape());
    }
    if !(0.0..=1.0).contains(&t) {
        return invalid(format!("sample_path: t = {t} outside [0, 1]"));
    }
    let z = target.zip(noise, "sample_path", |x, e| (1.0 - t) * x + t * e)?;
    let v = noise.sub(target)?;
    Ok((z, v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScheme {
    /// Two logit-normal draws; the larger is `t`, the smaller `r`.
    LogitNormal,
    /// `t ~ U[0,1]`, then `r ~ U[0,t]`.
    Uniform,
}

impl std::str::FromStr for TimeScheme {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "logit_normal" => Ok(TimeScheme::LogitNormal),
            "uniform" => Ok(TimeScheme::Uniform),
            other => Err(format!("unknown time scheme `{other}` (logit_normal | uniform)")),
        }
    }
}

impl std::fmt::Display for TimeScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TimeScheme::LogitNormal => "logit_normal",
            TimeScheme::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSamplerConfig {
    pub logit_mu: f64,
    pub logit_sigma: f64,
    /// Probability of forcing `r = t`.
    pub boundary_fraction: f64,
    pub scheme: TimeScheme,
}

impl Default for TimeSamplerConfig {
    fn default() -> Self {
        TimeSamplerConfig {
            logit_mu: -0.4,
            logit_sigma: 1.0,
            boundary_fraction: 0.25,
            scheme: TimeScheme::LogitNormal,
        }
    }
}

impl TimeSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.boundary_fraction) {
            return invalid(format!("boundary_fraction {} outside [0, 1]", self.boundary_fraction));
        }
        if !(self.logit_sigma > 0.0) || !self.logit_mu.is_finite() || !self.logit_sigma.is_finite() {
            return invalid("logit_sigma must be positive and logit_mu finite");
        }
        Ok(())
    }
}

/// One `(r, t)` draw with `0 ≤ r ≤ t ≤ 1`, and the advanced stream.
pub fn sample_times(rng: &RngStream, cfg: &TimeSamplerConfig) -> ((f64, f64), RngStream) {
    let (n, rng) = rng.normals(2);
    let (u, rng) = rng.uniforms(3);
    let (mut r, t) = match cfg.scheme {
        TimeScheme::LogitNormal => {
            let a = sigmoid(cfg.logit_mu + cfg.logit_sigma * n[0]);
            let b = sigmoid(cfg.logit_mu + cfg.logit_sigma * n[1]);
            (a.min(b), a.max(b))
        }
        TimeScheme::Uniform => (u[1] * u[0], u[0]),
    };
    if u[2] < cfg.boundary_fraction {
        r = t;
    }
    ((r, t), rng)
}

/// A batch of points on the path.
#[derive(Clone, Debug)]
pub struct PathBatch {
    pub z: Tensor,
    pub v: Tensor,
    pub r: Vec<f64>,
    pub t: Vec<f64>,
    pub cond: Tensor,
    pub target: Tensor,
    pub noise: Tensor,
}

impl PathBatch {
    /// Builds the batch from explicit noise and times.
    pub fn new(cond: &Tensor, target: &Tensor, noise: &Tensor, r: Vec<f64>, t: Vec<f64>) -> Result<Self> {
        let s = target.shape();
        if s.len() != 4 {
            return invalid(format!("path batch expects (B, C, H, W) fields, got {s:?}"));
        }
        if cond.shape() != s {
            return shape_err("path batch (conditioning)", s, cond.shape());
        }
        if noise.shape() != s {
            return shape_err("path batch (noise)", s, noise.shape());
        }
        let b = s[0];
        if r.len() != b || t.len() != b {
            return shape_err("path batch (times)", &[b], &[r.len().min(t.len())]);
        }
        for (&ri, &ti) in r.iter().zip(&t) {
            if !(0.0 <= ri && ri <= ti && ti <= 1.0) {
                return invalid(format!("path batch: need 0 ≤ r ≤ t ≤ 1, got r = {ri}, t = {ti}"));
            }
        }
        let per = target.numel() / b.max(1);
        let mut z = Vec::with_capacity(target.numel());
        for (i, (x, e)) in target.data().iter().zip(noise.data()).enumerate() {
            let ti = t[i / per];
            z.push((1.0 - ti) * x + ti * e);
        }
        Ok(PathBatch {
            z: Tensor::new(s.to_vec(), z)?,
            v: noise.sub(target)?,
            r,
            t,
            cond: cond.clone(),
            target: target.clone(),
            noise: noise.clone(),
        })
    }

    /// Draws noise and per-element times.
    pub fn draw(cond: &Tensor, target: &Tensor, rng: &RngStream, cfg: &TimeSamplerConfig) -> Result<(Self, RngStream)> {
        if target.ndim() != 4 || target.shape()[0] == 0 {
            return invalid(format!("stage-1 batch must be nonempty (B, C, H, W), got {:?}", target.shape()));
        }
        let b = target.shape()[0];
        let (noise, mut rng) = rng.gaussian(target.shape());
        let (mut r, mut t) = (Vec::with_capacity(b), Vec::with_capacity(b));
        for _ in 0..b {
            let ((ri, ti), next) = sample_times(&rng, cfg);
            r.push(ri);
            t.push(ti);
            rng = next;
        }
        Ok((Self::new(cond, target, &noise, r, t)?, rng))
    }

    pub fn batch(&self) -> usize {
        self.z.shape()[0]
    }
}

/// Batch-wise scalars `(B)` broadcastable against `(B, C, H, W)`.
pub fn per_batch(values: &[f64], ndim: usize) -> Tensor {
    let mut shape = vec![values.len()];
    shape.resize(ndim, 1);
    Tensor::vector(values).reshape(&shape).expect("reshape of a vector")
}

/// Output of [`rectified_target`].
pub struct Rectified {
    /// Network value at the path point, still attached to the parameter graph.
    pub u: Var,
    /// `stop_gradient(v − (t − r)·du)`.
    pub target: Tensor,
    /// Directional derivative of the network along `(v, 0, 1, 0)`.
    pub du: Tensor,
}

/// Evaluates the network once as a dual number with tangent `v` in `z` and
/// `1` in `t`, and builds the rectified target from the tangent.
pub fn rectified_target<F: VelocityField>(net: &F, batch: &PathBatch) -> Result<Rectified> {
    let b = batch.batch();
    let z = Var::dual(batch.z.clone(), batch.v.clone())?;
    let t = Var::dual(Tensor::vector(&batch.t), Tensor::ones(&[b]))?;
    let r = Var::constant(Tensor::vector(&batch.r));
    let c = Var::constant(batch.cond.clone());
    let u = net.eval(&z, &r, &t, &c)?;
    if u.shape() != batch.z.shape() {
        return shape_err("rectified_target (network output)", batch.z.shape(), u.shape());
    }
    let du = u.tangent();
    let gap: Vec<f64> = batch.t.iter().zip(&batch.r).map(|(t, r)| t - r).collect();
    let target = batch.v.sub(&per_batch(&gap, 4).mul(&du)?)?;
    Ok(Rectified { u, target, du })
}

/// Mean over batch, channels and grid of `(u − u_tgt)²`.
pub fn stage1_loss_on<F: VelocityField>(net: &F, batch: &PathBatch) -> Result<Var> {
    let rect = rectified_target(net, batch)?;
    let tgt = Var::constant(rect.target);
    rect.u.sub(&tgt)?.square()?.mean_all()
}

/// Draws a path batch and returns the Stage-I loss with the advanced stream.
pub fn stage1_loss<F: VelocityField>(
    net: &F,
    cond: &Tensor,
    target: &Tensor,
    rng: &RngStream,
    cfg: &TimeSamplerConfig,
) -> Result<(Var, RngStream)> {
    let (batch, rng) = PathBatch::draw(cond, target, rng, cfg)?;
    Ok((stage1_loss_on(net, &batch)?, rng))
}

fn times(b: usize, v: f64) -> Var {
    Var::constant(Tensor::full(&[b], v))
}

/// `noise − u(noise, 0, 1, c)` on traced variables.
pub fn one_step_var<F: VelocityField>(net: &F, noise: &Var, c: &Var) -> Result<Var> {
    if noise.shape() != c.shape() {
        return shape_err("sample_one_step", noise.shape(), c.shape());
    }
    let b = noise.shape()[0];
    noise.sub(&net.eval(noise, &times(b, 0.0), &times(b, 1.0), c)?)
}

/// 1-NFE sample `noise − u(noise, 0, 1, c)`.
pub fn sample_one_step<F: VelocityField>(net: &F, noise: &Tensor, c: &Tensor) -> Result<Tensor> {
    Ok(one_step_var(net, &Var::constant(noise.clone()), &Var::constant(c.clone()))?
        .value()
        .clone())
}

/// Uniform flow-time schedule `1 = s_0 > … > s_n = 0`.
pub fn uniform_schedule(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return invalid("multi-step sampler needs at least one segment");
    }
    Ok((0..=n).map(|i| if i == n { 0.0 } else { 1.0 - i as f64 / n as f64 }).collect())
}

/// Iterates `z ← z − (s_i − s_{i+1})·u(z, s_{i+1}, s_i, c)` over a strictly
/// decreasing schedule from 1 to 0.
pub fn sample_with_schedule<F: VelocityField>(net: &F, noise: &Tensor, c: &Tensor, schedule: &[f64]) -> Result<Tensor> {
    if noise.shape() != c.shape() {
        return shape_err("sample_multi_step", noise.shape(), c.shape());
    }
    if schedule.len() < 2 || schedule[0] != 1.0 || *schedule.last().expect("nonempty") != 0.0 {
        return invalid("sampler schedule must run from 1 to 0 with at least one segment");
    }
    if schedule.windows(2).any(|w| w[1] >= w[0]) {
        return invalid("sampler schedule must be strictly decreasing");
    }
    if schedule.len() == 2 {
        return sample_one_step(net, noise, c);
    }
    let b = noise.shape()[0];
    let cv = Var::constant(c.clone());
    let mut z = noise.clone();
    for w in schedule.windows(2) {
        let (hi, lo) = (w[0], w[1]);
        let zv = Var::constant(z.clone());
        let u = net.eval(&zv, &times(b, lo), &times(b, hi), &cv)?;
        z = z.sub(&u.value().scale(hi - lo))?;
    }
    Ok(z)
}

/// `n_segments` evaluations on the uniform schedule.
pub fn sample_multi_step<F: VelocityField>(net: &F, noise: &Tensor, c: &Tensor, n_segments: usize) -> Result<Tensor> {
    sample_with_schedule(net, noise, c, &uniform_schedule(n_segments)?)
}
