//! Flat `key = value` run configuration with dotted section keys.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ensemble::{CurriculumSchedule, CurriculumStage};
use crate::error::{Error, Result};
use crate::harness::optim::AdamWConfig;
use crate::synthworlds::{AnalyticKernel, InitialDist};
use crate::theorybench::BoundOptions;
use crate::transport::TimeSamplerConfig;
use crate::velnet::NetConfig;
use crate::verifmetrics::CrpsVariant;

/// Every recognized key with its default value and a short note.
pub const DEFAULTS: &[(&str, &str, &str)] = &[
    ("seed", "0", "root seed of every random stream"),
    ("world.kernel", "affine_gaussian", "affine_gaussian | chaotic_map | advection2d"),
    ("world.gain", "0.8", "affine gain a, one value or one per channel"),
    ("world.bias", "0.0", "affine bias"),
    ("world.sigma", "0.3", "noise std (forcing std for advection2d)"),
    ("world.a", "1.05", "chaotic map linear coefficient"),
    ("world.b", "0.3", "chaotic map sine amplitude"),
    ("world.omega", "1.0", "chaotic map sine frequency"),
    ("world.velocity", "0.5,0.25", "advection velocity (vx, vy)"),
    ("world.kappa", "0.05", "diffusion coefficient"),
    ("world.time_step", "0.5", "advection time step"),
    ("world.channels", "1", "field channels"),
    ("world.height", "1", "grid rows"),
    ("world.width", "1", "grid columns"),
    ("world.episodes", "64", "independent trajectories"),
    ("world.steps", "32", "states per trajectory"),
    ("world.initial", "gaussian", "gaussian | fixed"),
    ("world.initial_mean", "0.0", "mean of a gaussian initial state"),
    ("world.initial_std", "1.0", "std of a gaussian initial state"),
    ("world.initial_value", "0.0", "value of a fixed initial state"),
    ("net.hidden_dim", "32", "token width"),
    ("net.depth", "2", "number of blocks"),
    ("net.embed_dim", "32", "time embedding width"),
    ("net.mixing", "per_cell_dense", "per_cell_dense | full_attention"),
    ("net.attention_heads", "4", "heads for full_attention"),
    ("net.ffn_mult", "2", "SwiGLU width multiple"),
    ("net.time_scale", "10", "flow-time scale before the sinusoidal code"),
    ("stage1.epochs", "20", "desk-scale budget; the reference schedule runs 300 epochs"),
    ("stage1.lr_max", "1e-4", "initial learning rate"),
    ("stage1.lr_min", "1e-6", "cosine floor"),
    ("stage1.weight_decay", "1e-4", "decoupled weight decay"),
    ("stage1.batch_size", "32", "pairs per step"),
    ("stage1.beta1", "0.9", "AdamW first-moment decay"),
    ("stage1.beta2", "0.999", "AdamW second-moment decay"),
    ("stage1.eps", "1e-8", "AdamW denominator offset"),
    ("stage1.time_scheme", "logit_normal", "logit_normal | uniform"),
    ("stage1.logit_mu", "-0.4", "logit-normal location"),
    ("stage1.logit_sigma", "1.0", "logit-normal scale"),
    ("stage1.boundary_fraction", "0.25", "share of draws with r = t"),
    ("stage2.horizons", "1,2", "rollout horizon of each curriculum stage"),
    ("stage2.epochs", "15,15", "epochs per stage, one value or one per stage"),
    ("stage2.lr", "1e-5", "learning rate, one value or one per stage"),
    ("stage2.ensemble_size", "2", "members per training rollout"),
    ("stage2.variant", "fair", "dispersion coefficient: paper 1/(2K²) | fair 1/(2K(K−1))"),
    ("stage2.latitude_weighted", "false", "weight the training loss by latitude"),
    ("stage2.batch_size", "1", "pairs per optimizer step"),
    ("stage2.weight_decay", "1e-4", "decoupled weight decay"),
    ("eval.ensemble_size", "20", "members per forecast"),
    ("eval.horizon", "10", "leads 1..=horizon are scored"),
    ("eval.initializations", "32", "test-split starting states"),
    ("eval.variant", "paper", "paper | fair"),
    ("eval.latitude_weighted", "true", "latitude-weight the metrics"),
    ("eval.write_ensemble", "false", "store every member field"),
    ("bound.horizon", "8", "largest rollout horizon checked"),
    ("bound.n_samples", "10000", "chains per law"),
    ("bound.gap_states", "32", "visited states per step for kernel gaps"),
    ("bound.gap_samples", "1000", "draws per kernel gap"),
    ("bound.probes", "64", "probe states per step for the sensitivity estimate"),
    ("bound.probe_delta", "1e-3", "probe pair offset"),
    ("bound.probe_samples", "200", "draws per probe"),
    ("bound.slack_factor", "3", "slack as a multiple of the self-distance floor"),
    ("crps_w1.members", "10000", "standard normal members"),
    ("crps_w1.truth", "0.0", "observation"),
];

/// Raw configuration values; every known key always has a value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl Default for RawConfig {
    fn default() -> Self {
        RawConfig {
            values: DEFAULTS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn cfg_err<T>(key: &str, msg: impl Into<String>) -> Result<T> {
    Err(Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    })
}

impl RawConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => cfg_err(key, "unknown key"),
        }
    }

    /// Applies a `key=value` override.
    pub fn set_override(&mut self, assignment: &str) -> Result<()> {
        match assignment.split_once('=') {
            Some((k, v)) => self.set(k.trim(), v),
            None => cfg_err(assignment.trim(), "override must look like key=value"),
        }
    }

    /// Applies every line of a config file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return cfg_err(line, format!("line {} is not `key = value`", n + 1));
            };
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        match self.values.get(key) {
            Some(v) => Ok(v),
            None => cfg_err(key, "unknown key"),
        }
    }

    /// Every key in sorted order, one `key = value` per line.
    pub fn resolved_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key)?;
        v.parse().or_else(|e: T::Err| cfg_err(key, format!("cannot parse `{v}`: {e}")))
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key)?;
        let items: Vec<T> = v
            .split(',')
            .map(|s| s.trim().parse().or_else(|e: T::Err| cfg_err(key, format!("cannot parse `{s}`: {e}"))))
            .collect::<Result<_>>()?;
        if items.is_empty() {
            return cfg_err(key, "empty list");
        }
        Ok(items)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub kernel: AnalyticKernel,
    pub field: [usize; 3],
    pub episodes: usize,
    pub steps: usize,
    pub initial: InitialDist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    pub times: TimeSamplerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub schedule: CurriculumSchedule,
    pub adamw: AdamWConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub ensemble_size: usize,
    pub horizon: usize,
    pub initializations: usize,
    pub variant: CrpsVariant,
    pub latitude_weighted: bool,
    pub write_ensemble: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundConfig {
    pub horizon: usize,
    pub options: BoundOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrpsW1Config {
    pub members: usize,
    pub truth: f64,
}

/// Typed view of a resolved [`RawConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub net: NetConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
    pub bound: BoundConfig,
    pub crps_w1: CrpsW1Config,
}

fn per_stage<T: Clone>(key: &str, v: Vec<T>, n: usize) -> Result<Vec<T>> {
    match v.len() {
        1 => Ok(vec![v[0].clone(); n]),
        l if l == n => Ok(v),
        l => cfg_err(key, format!("{l} values for {n} curriculum stages")),
    }
}

fn keyed(key: &str, r: Result<()>) -> Result<()> {
    r.or_else(|e| cfg_err(key, e.to_string()))
}

impl TrainConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let sigma: f64 = raw.parse("world.sigma")?;
        let kernel = match raw.get("world.kernel")? {
            "affine_gaussian" => AnalyticKernel::AffineGaussian {
                gain: raw.list("world.gain")?,
                bias: raw.parse("world.bias")?,
                sigma,
            },
            "chaotic_map" => AnalyticKernel::ChaoticMap {
                a: raw.parse("world.a")?,
                b: raw.parse("world.b")?,
                omega: raw.parse("world.omega")?,
                sigma,
            },
            "advection2d" => {
                let v: Vec<f64> = raw.list("world.velocity")?;
                if v.len() != 2 {
                    return cfg_err("world.velocity", "expects two components");
                }
                AnalyticKernel::Advection2d {
                    velocity: (v[0], v[1]),
                    kappa: raw.parse("world.kappa")?,
                    forcing_std: sigma,
                    time_step: raw.parse("world.time_step")?,
                }
            }
            other => return cfg_err("world.kernel", format!("unknown kernel `{other}`")),
        };
        keyed("world.kernel", kernel.validate())?;
        let field = [raw.parse("world.channels")?, raw.parse("world.height")?, raw.parse("world.width")?];
        if field.contains(&0) {
            return cfg_err("world.channels", "field extents must be ≥ 1");
        }
        let initial = match raw.get("world.initial")? {
            "gaussian" => InitialDist::Gaussian {
                mean: raw.parse("world.initial_mean")?,
                std: raw.parse("world.initial_std")?,
            },
            "fixed" => InitialDist::Fixed {
                value: raw.parse("world.initial_value")?,
            },
            other => return cfg_err("world.initial", format!("unknown initial law `{other}`")),
        };
        let world = WorldConfig {
            kernel,
            field,
            episodes: raw.parse("world.episodes")?,
            steps: raw.parse("world.steps")?,
            initial,
        };
        if world.steps < 2 || world.episodes == 0 {
            return cfg_err("world.steps", "need at least two steps and one episode");
        }

        let net = NetConfig {
            channels: field[0],
            grid: (field[1], field[2]),
            hidden_dim: raw.parse("net.hidden_dim")?,
            depth: raw.parse("net.depth")?,
            embed_dim: raw.parse("net.embed_dim")?,
            mixing: raw.parse("net.mixing")?,
            attention_heads: raw.parse("net.attention_heads")?,
            ffn_mult: raw.parse("net.ffn_mult")?,
            time_scale: raw.parse("net.time_scale")?,
        };
        keyed("net", net.validate())?;

        let adamw1 = AdamWConfig {
            beta1: raw.parse("stage1.beta1")?,
            beta2: raw.parse("stage1.beta2")?,
            eps: raw.parse("stage1.eps")?,
            weight_decay: raw.parse("stage1.weight_decay")?,
        };
        let times = TimeSamplerConfig {
            logit_mu: raw.parse("stage1.logit_mu")?,
            logit_sigma: raw.parse("stage1.logit_sigma")?,
            boundary_fraction: raw.parse("stage1.boundary_fraction")?,
            scheme: raw.parse("stage1.time_scheme")?,
        };
        keyed("stage1.time_scheme", times.validate())?;
        let stage1 = Stage1Config {
            epochs: raw.parse("stage1.epochs")?,
            lr_max: raw.parse("stage1.lr_max")?,
            lr_min: raw.parse("stage1.lr_min")?,
            batch_size: raw.parse("stage1.batch_size")?,
            adamw: adamw1.clone(),
            times,
        };
        if stage1.epochs == 0 || stage1.batch_size == 0 {
            return cfg_err("stage1.epochs", "epochs and batch size must be ≥ 1");
        }

        let horizons: Vec<usize> = raw.list("stage2.horizons")?;
        let n = horizons.len();
        let epochs = per_stage("stage2.epochs", raw.list("stage2.epochs")?, n)?;
        let lrs = per_stage("stage2.lr", raw.list("stage2.lr")?, n)?;
        let schedule = CurriculumSchedule {
            stages: (0..n)
                .map(|i| CurriculumStage {
                    horizon: horizons[i],
                    epochs: epochs[i],
                    lr: lrs[i],
                })
                .collect(),
            ensemble_size: raw.parse("stage2.ensemble_size")?,
            variant: raw.parse("stage2.variant")?,
            latitude_weighted: raw.parse("stage2.latitude_weighted")?,
            batch_size: raw.parse("stage2.batch_size")?,
        };
        keyed("stage2", schedule.validate())?;
        let stage2 = Stage2Config {
            schedule,
            adamw: AdamWConfig {
                weight_decay: raw.parse("stage2.weight_decay")?,
                ..adamw1
            },
        };

        let eval = EvalConfig {
            ensemble_size: raw.parse("eval.ensemble_size")?,
            horizon: raw.parse("eval.horizon")?,
            initializations: raw.parse("eval.initializations")?,
            variant: raw.parse("eval.variant")?,
            latitude_weighted: raw.parse("eval.latitude_weighted")?,
            write_ensemble: raw.parse("eval.write_ensemble")?,
        };
        if eval.ensemble_size < 2 || eval.horizon == 0 || eval.initializations == 0 {
            return cfg_err("eval.ensemble_size", "need K ≥ 2, horizon ≥ 1 and at least one initialization");
        }

        let bound = BoundConfig {
            horizon: raw.parse("bound.horizon")?,
            options: BoundOptions {
                n_samples: raw.parse("bound.n_samples")?,
                gap_states: raw.parse("bound.gap_states")?,
                gap_samples: raw.parse("bound.gap_samples")?,
                probes: raw.parse("bound.probes")?,
                probe_delta: raw.parse("bound.probe_delta")?,
                probe_samples: raw.parse("bound.probe_samples")?,
                slack_factor: raw.parse("bound.slack_factor")?,
            },
        };
        if bound.options.gap_samples < 100 {
            return cfg_err("bound.gap_samples", "kernel gaps need at least 100 draws");
        }
        let crps_w1 = CrpsW1Config {
            members: raw.parse("crps_w1.members")?,
            truth: raw.parse("crps_w1.truth")?,
        };
        if crps_w1.members == 0 {
            return cfg_err("crps_w1.members", "need at least one member");
        }
        Ok(TrainConfig {
            seed: raw.parse("seed")?,
            world,
            net,
            stage1,
            stage2,
            eval,
            bound,
            crps_w1,
        })
    }

    /// Defaults, then the file, then `key=value` overrides, then the seed.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<(RawConfig, TrainConfig)> {
        let mut raw = RawConfig::default();
        if let Some(p) = path {
            raw.apply_text(&std::fs::read_to_string(p)?)?;
        }
        for o in overrides {
            raw.set_override(o)?;
        }
        if let Some(s) = seed {
            raw.set("seed", &s.to_string())?;
        }
        let cfg = TrainConfig::from_raw(&raw)?;
        Ok((raw, cfg))
    }
}
