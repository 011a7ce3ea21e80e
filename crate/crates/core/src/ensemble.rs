//! Autoregressive ensemble rollouts, the differentiable CRPS loss, and the
//! Stage-II curriculum fine-tuning loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffkit::{RngStream, Tensor, Var};
use crate::error::{invalid, shape_err, Error, Result};
use crate::harness::optim::AdamW;
use crate::synthworlds::{AnalyticKernel, Dataset, NormStats, Split};
use crate::transport::{one_step_var, sample_one_step, Counted, VelocityField};
use crate::velnet::NetParams;
use crate::verifmetrics::{CrpsVariant, LatWeights};

/// A stochastic one-step map on batched physical fields `(B, C, H, W)`.
pub trait Transition: Sync {
    fn step(&self, c: &Tensor, rng: &RngStream) -> Result<Tensor>;
}

impl Transition for AnalyticKernel {
    fn step(&self, c: &Tensor, rng: &RngStream) -> Result<Tensor> {
        Ok(self.sample(c, rng)?.0)
    }
}

/// A network working in normalized units, exposed as a physical-space kernel:
/// normalize, one 1-NFE draw, denormalize.
pub struct ModelKernel<'a, F> {
    pub net: &'a F,
    pub stats: NormStats,
}

impl<'a, F: VelocityField + Sync> ModelKernel<'a, F> {
    pub fn new(net: &'a F, stats: NormStats) -> Self {
        ModelKernel { net, stats }
    }
}

impl<F: VelocityField + Sync> Transition for ModelKernel<'_, F> {
    fn step(&self, c: &Tensor, rng: &RngStream) -> Result<Tensor> {
        let noise = rng.gaussian(c.shape()).0;
        let x = sample_one_step(self.net, &noise, &self.stats.normalize(c)?)?;
        self.stats.denormalize(&x)
    }
}

/// K members rolled out H leads from one initial field.
#[derive(Clone, Debug)]
pub struct EnsembleForecast {
    /// `(K, H, C, Hg, W)`; lead `l` is stored at index `l − 1`.
    pub members: Tensor,
    pub initial: Tensor,
    pub member_streams: Vec<RngStream>,
    pub nfe_count: u64,
}

impl EnsembleForecast {
    pub fn ensemble_size(&self) -> usize {
        self.members.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.members.shape()[1]
    }

    /// All members at lead `l ≥ 1`, shaped `(K, C, Hg, W)`.
    pub fn lead(&self, l: usize) -> Result<Tensor> {
        if l == 0 || l > self.horizon() {
            return invalid(format!("lead {l} outside 1..={}", self.horizon()));
        }
        let s = self.members.slice_axis(1, l - 1, 1)?;
        let mut shape = s.shape().to_vec();
        shape.remove(1);
        s.reshape(&shape)
    }

    pub fn member(&self, k: usize, l: usize) -> Result<Tensor> {
        let lead = self.lead(l)?;
        if k >= self.ensemble_size() {
            return invalid(format!("member {k} outside 0..{}", self.ensemble_size()));
        }
        let s = lead.slice_axis(0, k, 1)?;
        s.reshape(&s.shape()[1..])
    }
}

/// Stream of member `k`; lead `l` draws its noise from `member_stream(rng, k).child(l)`.
pub fn member_stream(rng: &RngStream, k: usize) -> RngStream {
    rng.child(k as u64)
}

fn lead_noise(stream: &RngStream, l: usize, shape: &[usize]) -> Tensor {
    stream.child(l as u64).gaussian(shape).0
}

/// Rolls out `k` members for `h` leads from an unbatched `(C, Hg, W)` field,
/// feeding each one-step prediction back as the next conditioning state.
/// Members are evaluated together as one batch per lead.
pub fn rollout_ensemble<F: VelocityField>(
    net: &F,
    initial: &Tensor,
    k: usize,
    h: usize,
    rng: &RngStream,
) -> Result<EnsembleForecast> {
    if k == 0 || h == 0 {
        return invalid(format!("rollout needs K ≥ 1 and H ≥ 1, got K = {k}, H = {h}"));
    }
    if initial.ndim() != 3 {
        return invalid(format!("rollout initial field must be (C, H, W), got {:?}", initial.shape()));
    }
    let field = initial.shape().to_vec();
    let streams: Vec<RngStream> = (0..k).map(|i| member_stream(rng, i)).collect();
    let counted = Counted::new(net);
    let mut batch_shape = vec![k];
    batch_shape.extend_from_slice(&field);
    let mut c = initial.reshape(&[&[1][..], &field[..]].concat())?.broadcast_to(&batch_shape)?;
    let mut leads = Vec::with_capacity(h);
    for l in 1..=h {
        let noise: Vec<Tensor> = streams
            .iter()
            .map(|s| lead_noise(s, l, &field).reshape(&[&[1][..], &field[..]].concat()))
            .collect::<Result<_>>()?;
        let noise = Tensor::concat(&noise.iter().collect::<Vec<_>>(), 0)?;
        let x = one_step_var(&counted, &Var::constant(noise), &Var::constant(c))?.value().clone();
        leads.push(x.reshape(&[&[k, 1][..], &field[..]].concat())?);
        c = x;
    }
    let members = Tensor::concat(&leads.iter().collect::<Vec<_>>(), 1)?;
    Ok(EnsembleForecast {
        members,
        initial: initial.clone(),
        member_streams: streams,
        nfe_count: counted.nfe(),
    })
}

/// One forecast per initial field in `(N, C, Hg, W)`, initialization `n`
/// using `rng.child(n)`; initializations run in parallel.
pub fn rollout_many<F: VelocityField + Sync>(
    net: &F,
    initials: &Tensor,
    k: usize,
    h: usize,
    rng: &RngStream,
) -> Result<Vec<EnsembleForecast>> {
    if initials.ndim() != 4 {
        return invalid(format!("rollout_many expects (N, C, H, W), got {:?}", initials.shape()));
    }
    let n = initials.shape()[0];
    (0..n)
        .into_par_iter()
        .map(|i| {
            let init = initials.slice_axis(0, i, 1)?;
            let init = init.reshape(&init.shape()[1..])?;
            rollout_ensemble(net, &init, k, h, &rng.child(i as u64))
        })
        .collect()
}

fn weighted_l1(d: &Var, w: Option<&Tensor>) -> Result<Var> {
    let a = d.abs()?;
    match w {
        Some(w) => a.mul(&Var::constant(w.clone()))?.mean_all(),
        None => a.mean_all(),
    }
}

/// `(1/K)Σ‖x_k − y‖₁ − coef·Σ_k Σ_k' ‖x_k − x_k'‖₁` where `‖·‖₁` is the
/// (optionally latitude-weighted) mean absolute value over all axes.
pub fn crps_loss(members: &[Var], truth: &Var, weights: Option<&LatWeights>, variant: CrpsVariant) -> Result<Var> {
    let k = members.len();
    if k == 0 {
        return invalid("crps_loss needs at least one member");
    }
    for m in members {
        if m.shape() != truth.shape() {
            return shape_err("crps_loss", truth.shape(), m.shape());
        }
    }
    let w = match weights {
        Some(w) => {
            let n = truth.shape().len();
            if n < 2 || truth.shape()[n - 2] != w.rows().len() || truth.shape()[n - 1] != w.width() {
                return shape_err("crps_loss weights", &[w.rows().len(), w.width()], truth.shape());
            }
            Some(w.to_tensor())
        }
        None => None,
    };
    let mut skill = weighted_l1(&members[0].sub(truth)?, w.as_ref())?;
    for m in &members[1..] {
        skill = skill.add(&weighted_l1(&m.sub(truth)?, w.as_ref())?)?;
    }
    let skill = skill.scale(1.0 / k as f64)?;
    if k == 1 {
        return Ok(skill);
    }
    let coef = variant.coefficient(k)?;
    let mut pairs: Option<Var> = None;
    for i in 0..k {
        for j in i + 1..k {
            let d = weighted_l1(&members[i].sub(&members[j])?, w.as_ref())?;
            pairs = Some(match pairs {
                Some(p) => p.add(&d)?,
                None => d,
            });
        }
    }
    skill.sub(&pairs.expect("k ≥ 2").scale(2.0 * coef)?)
}

/// Options for [`stage2_loss`].
#[derive(Clone, Debug)]
pub struct RolloutLossOptions<'a> {
    pub horizon: usize,
    pub ensemble_size: usize,
    pub variant: CrpsVariant,
    pub weights: Option<&'a LatWeights>,
    /// Stop gradients after the first transition.
    pub detach_first: bool,
}

/// Rolls `ensemble_size` members `horizon` steps from a `(B, C, H, W)` batch
/// with gradients kept through every transition and scores only the terminal
/// state.
pub fn stage2_loss<F: VelocityField>(
    net: &F,
    cond: &Tensor,
    truth: &Tensor,
    rng: &RngStream,
    opts: &RolloutLossOptions<'_>,
) -> Result<Var> {
    if opts.horizon == 0 || opts.ensemble_size == 0 {
        return invalid("stage-II rollout needs horizon ≥ 1 and ensemble size ≥ 1");
    }
    if cond.shape() != truth.shape() {
        return shape_err("stage2_loss", cond.shape(), truth.shape());
    }
    let mut finals = Vec::with_capacity(opts.ensemble_size);
    for k in 0..opts.ensemble_size {
        let stream = member_stream(rng, k);
        let mut c = Var::constant(cond.clone());
        for l in 1..=opts.horizon {
            let eps = Var::constant(lead_noise(&stream, l, cond.shape()));
            let mut x = one_step_var(net, &eps, &c)?;
            if opts.detach_first && l == 1 {
                x = x.stop_gradient()?;
            }
            c = x;
        }
        finals.push(c);
    }
    crps_loss(&finals, &Var::constant(truth.clone()), opts.weights, opts.variant)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub horizon: usize,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub stages: Vec<CurriculumStage>,
    pub ensemble_size: usize,
    pub variant: CrpsVariant,
    pub latitude_weighted: bool,
    pub batch_size: usize,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule {
            stages: vec![
                CurriculumStage { horizon: 1, epochs: 15, lr: 1e-5 },
                CurriculumStage { horizon: 2, epochs: 15, lr: 1e-5 },
            ],
            ensemble_size: 2,
            variant: CrpsVariant::Fair,
            latitude_weighted: false,
            batch_size: 1,
        }
    }
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return invalid("curriculum needs at least one stage");
        }
        if self.stages.iter().any(|s| s.horizon == 0) {
            return invalid("curriculum horizons must be ≥ 1");
        }
        if self.stages.windows(2).any(|w| w[1].horizon < w[0].horizon) {
            return invalid("curriculum horizons must be nondecreasing");
        }
        if self.stages.iter().any(|s| !(s.lr >= 0.0 && s.lr.is_finite())) {
            return invalid("curriculum learning rates must be finite and ≥ 0");
        }
        if self.ensemble_size == 0 || self.batch_size == 0 {
            return invalid("curriculum ensemble size and batch size must be ≥ 1");
        }
        self.variant.coefficient(self.ensemble_size).map(|_| ())
    }

    pub fn max_horizon(&self) -> usize {
        self.stages.iter().map(|s| s.horizon).max().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: usize,
    pub horizon: usize,
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Log {
    pub epochs: Vec<EpochLog>,
    pub samples: u64,
    /// Samples scored by the CRPS loss; equals `samples` since only the
    /// terminal lead is scored.
    pub loss_evaluations: u64,
    pub nfe: u64,
}

/// Uniform-key argsort of `0..n` drawn from `rng`.
pub fn shuffled(n: usize, rng: &RngStream) -> Vec<usize> {
    let (keys, _) = rng.uniforms(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|a, b| keys[*a].total_cmp(&keys[*b]));
    idx
}

/// Curriculum CRPS fine-tuning on normalized training pairs
/// `(x^τ, x^{τ+R_m})`, one optimizer step per mini-batch.
pub fn finetune_stage2(
    params: &mut NetParams,
    dataset: &Dataset,
    schedule: &CurriculumSchedule,
    opt: &mut AdamW,
    rng: &RngStream,
) -> Result<Stage2Log> {
    schedule.validate()?;
    let weights = if schedule.latitude_weighted {
        Some(crate::verifmetrics::latitude_weights(dataset.latitudes(), dataset.field_shape()[2])?)
    } else {
        None
    };
    let stats = dataset.stats().clone();
    let mut log = Stage2Log::default();
    let root = rng.child_named("stage2");
    for (m, stage) in schedule.stages.iter().enumerate() {
        let starts = dataset.pair_starts(Split::Train, stage.horizon);
        if starts.is_empty() {
            return invalid(format!(
                "dataset has no training pairs {} steps apart (episode length {})",
                stage.horizon,
                dataset.episode_len()
            ));
        }
        let opts = RolloutLossOptions {
            horizon: stage.horizon,
            ensemble_size: schedule.ensemble_size,
            variant: schedule.variant,
            weights: weights.as_ref(),
            detach_first: false,
        };
        for epoch in 0..stage.epochs {
            let erng = root.child(m as u64).child(epoch as u64);
            let order = shuffled(starts.len(), &erng.child_named("order"));
            let mut total = 0.0;
            let mut steps = 0;
            for (bi, chunk) in order.chunks(schedule.batch_size).enumerate() {
                let idx: Vec<usize> = chunk.iter().map(|&i| starts[i]).collect();
                let tgt: Vec<usize> = idx.iter().map(|&i| i + stage.horizon).collect();
                let cond = stats.normalize(&dataset.gather(&idx)?)?;
                let truth = stats.normalize(&dataset.gather(&tgt)?)?;
                let grads = {
                    let bound = params.bind_trainable();
                    let counted = Counted::new(&bound);
                    let loss = stage2_loss(&counted, &cond, &truth, &erng.child(bi as u64), &opts)?;
                    let value = loss.value().item()?;
                    if !value.is_finite() {
                        return Err(Error::NonFinite(format!(
                            "stage-II loss at stage {m}, epoch {epoch}, batch {bi}"
                        )));
                    }
                    log.nfe += counted.nfe();
                    log.loss_evaluations += idx.len() as u64;
                    total += value;
                    let g = loss.backward()?;
                    bound.vars().iter().map(|v| g.wrt(v)).collect::<Vec<_>>()
                };
                opt.step(params, &grads, stage.lr)?;
                log.samples += idx.len() as u64;
                steps += 1;
            }
            log.epochs.push(EpochLog {
                stage: m,
                horizon: stage.horizon,
                epoch,
                lr: stage.lr,
                mean_loss: total / steps as f64,
                steps,
            });
        }
    }
    Ok(log)
}
