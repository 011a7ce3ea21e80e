use serde::{Deserialize, Serialize};

use crate::diffkit::{RngStream, Tensor};
use crate::ensemble::{rollout_many, shuffled};
use crate::error::{invalid, Error, Result};
use crate::harness::config::{EvalConfig, Stage1Config};
use crate::harness::optim::{cosine_lr, AdamW};
use crate::synthworlds::{Dataset, NormStats, Split};
use crate::transport::{stage1_loss, VelocityField};
use crate::velnet::NetParams;
use crate::verifmetrics::{latitude_weights, LatWeights, MetricReport};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Log {
    /// Loss at every optimizer step.
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub epoch_means: Vec<f64>,
}

impl Stage1Log {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,lr,loss\n");
        for (i, (l, lr)) in self.losses.iter().zip(&self.learning_rates).enumerate() {
            s.push_str(&format!("{i},{lr:.11e},{l:.11e}\n"));
        }
        s
    }
}

/// Stage-I transport pretraining on normalized one-step pairs of the training
/// split. `on_epoch` sees the parameters after every completed epoch. A
/// non-finite loss aborts before the offending update is applied.
pub fn train_stage1(
    params: &mut NetParams,
    dataset: &Dataset,
    cfg: &Stage1Config,
    rng: &RngStream,
    mut on_epoch: impl FnMut(usize, &NetParams) -> Result<()>,
) -> Result<Stage1Log> {
    cfg.times.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return invalid("stage-I training needs epochs ≥ 1 and batch size ≥ 1");
    }
    let starts = dataset.pair_starts(Split::Train, 1);
    if starts.is_empty() {
        return invalid("dataset has no one-step training pairs");
    }
    let stats = dataset.stats();
    let mut opt = AdamW::for_params(cfg.adamw.clone(), params);
    let batches = starts.len().div_ceil(cfg.batch_size);
    let mut log = Stage1Log::default();
    for epoch in 0..cfg.epochs {
        let erng = rng.child(epoch as u64);
        let order = shuffled(starts.len(), &erng.child_named("order"));
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let idx: Vec<usize> = chunk.iter().map(|&i| starts[i]).collect();
            let next: Vec<usize> = idx.iter().map(|i| i + 1).collect();
            let cond = stats.normalize(&dataset.gather(&idx)?)?;
            let target = stats.normalize(&dataset.gather(&next)?)?;
            let lr = cosine_lr(
                epoch as f64 + bi as f64 / batches as f64,
                cfg.epochs as f64,
                cfg.lr_max,
                cfg.lr_min,
            )?;
            let grads = {
                let bound = params.bind_trainable();
                let (loss, _) = stage1_loss(&bound, &cond, &target, &erng.child(bi as u64), &cfg.times)?;
                let value = loss.value().item()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("stage-I loss at epoch {epoch}, step {bi}")));
                }
                log.losses.push(value);
                log.learning_rates.push(lr);
                total += value;
                let g = loss.backward()?;
                bound.vars().iter().map(|v| g.wrt(v)).collect::<Vec<_>>()
            };
            opt.step(params, &grads, lr)?;
        }
        log.epoch_means.push(total / batches as f64);
        on_epoch(epoch, params)?;
    }
    Ok(log)
}

/// Metric weights for a dataset's grid.
pub fn metric_weights(dataset: &Dataset, latitude_weighted: bool) -> Result<LatWeights> {
    let [_, h, w] = dataset.field_shape();
    if latitude_weighted {
        latitude_weights(dataset.latitudes(), w)
    } else {
        Ok(LatWeights::uniform(h, w))
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Starting frames in the dataset.
    pub starts: Vec<usize>,
    /// `(N, K, H, C, Hg, W)` member fields in physical units.
    pub members: Tensor,
    pub nfe_total: u64,
    pub nfe_per_rollout: u64,
}

/// Up to `n` evenly spaced test-split frames from which `horizon` further
/// steps stay inside one episode.
pub fn evaluation_starts(dataset: &Dataset, horizon: usize, n: usize) -> Result<Vec<usize>> {
    let all = dataset.pair_starts(Split::Test, horizon);
    if all.is_empty() {
        return invalid(format!(
            "horizon {horizon} exceeds the test split (episode length {})",
            dataset.episode_len()
        ));
    }
    if all.len() <= n {
        return Ok(all);
    }
    Ok((0..n).map(|i| all[i * all.len() / n]).collect())
}

/// Rolls out `K` members from test-split states with the network acting in
/// the space given by `stats`, and scores leads `1..=horizon` in physical
/// units.
pub fn evaluate<F: VelocityField + Sync>(
    net: &F,
    stats: &NormStats,
    dataset: &Dataset,
    cfg: &EvalConfig,
    rng: &RngStream,
) -> Result<Evaluation> {
    let starts = evaluation_starts(dataset, cfg.horizon, cfg.initializations)?;
    let weights = metric_weights(dataset, cfg.latitude_weighted)?;
    let initials = stats.normalize(&dataset.gather(&starts)?)?;
    let forecasts = rollout_many(net, &initials, cfg.ensemble_size, cfg.horizon, rng)?;
    let n = starts.len();
    let k = cfg.ensemble_size;
    let field = dataset.field_shape();
    let mut leads = Vec::with_capacity(cfg.horizon);
    let mut per_lead = Vec::with_capacity(cfg.horizon);
    for l in 1..=cfg.horizon {
        let slices: Vec<Tensor> = forecasts
            .iter()
            .map(|f| stats.denormalize(&f.lead(l)?))
            .collect::<Result<_>>()?;
        let ens = Tensor::concat(&slices.iter().collect::<Vec<_>>(), 0)?.reshape(&[n, k, field[0], field[1], field[2]])?;
        let truth_idx: Vec<usize> = starts.iter().map(|s| s + l).collect();
        let truth = dataset.gather(&truth_idx)?;
        leads.push(MetricReport::lead_metrics(l, &ens, &truth, &weights, cfg.variant)?);
        per_lead.push(ens.reshape(&[n, k, 1, field[0], field[1], field[2]])?);
    }
    let members = Tensor::concat(&per_lead.iter().collect::<Vec<_>>(), 2)?;
    let nfe_total = forecasts.iter().map(|f| f.nfe_count).sum();
    Ok(Evaluation {
        report: MetricReport {
            ensemble_size: k,
            initializations: n,
            variant: cfg.variant,
            leads,
        },
        starts,
        members,
        nfe_total,
        nfe_per_rollout: forecasts.first().map_or(0, |f| f.nfe_count),
    })
}
