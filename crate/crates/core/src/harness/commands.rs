//! The six subcommands of the command-line tool.

use std::path::PathBuf;

use serde::Serialize;

use crate::diffkit::RngStream;
use crate::ensemble::{finetune_stage2, ModelKernel};
use crate::error::{invalid, Error, Result};
use crate::harness::config::{RawConfig, TrainConfig};
use crate::harness::manifest::{RunDir, RunManifest};
use crate::harness::optim::AdamW;
use crate::harness::train::{evaluate, train_stage1, Evaluation};
use crate::synthworlds::{generate_dataset, AffineOracle, Dataset, NormStats};
use crate::theorybench::{crps_w1_relation_check, verify_rollout_bound, BoundReport};
use crate::velnet::{load_checkpoint, write_checkpoint, NetParams};
use crate::verifmetrics::sig12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainStage1,
    FinetuneStage2,
    Evaluate,
    VerifyBound,
    CheckCrpsW1,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainStage1 => "train-stage1",
            Command::FinetuneStage2 => "finetune-stage2",
            Command::Evaluate => "evaluate",
            Command::VerifyBound => "verify-bound",
            Command::CheckCrpsW1 => "check-crps-w1",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CommandArgs {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Use the analytic affine oracle in place of a checkpoint.
    pub oracle: bool,
}

/// 1 for configuration and argument problems, 2 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::Unsupported(_) => 1,
        _ => 2,
    }
}

pub const DATASET_FILE: &str = "dataset.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.avfc";
pub const STAGE2_CHECKPOINT_FILE: &str = "checkpoint_stage2.avfc";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BOUND_FILE: &str = "bound.csv";

struct Ctx {
    raw: RawConfig,
    cfg: TrainConfig,
    root: RngStream,
    run: RunDir,
}

fn checkpoint_bytes(p: &NetParams) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, p)?;
    Ok(buf)
}

fn dataset_bytes(d: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    d.write(&mut buf)?;
    Ok(buf)
}

impl Ctx {
    fn new(args: &CommandArgs) -> Result<Self> {
        let (raw, cfg) = TrainConfig::resolve(args.config.as_deref(), &args.sets, args.seed)?;
        let run = RunDir::create(&args.out, args.command.name(), cfg.seed, raw.resolved_text())?;
        Ok(Ctx {
            root: RngStream::new(cfg.seed),
            raw,
            cfg,
            run,
        })
    }

    fn generate(&self) -> Result<Dataset> {
        let w = &self.cfg.world;
        generate_dataset(&w.kernel, &w.initial, w.field, w.episodes, w.steps, &self.root.child_named("data"))
    }

    /// The dataset given on the command line, or one generated from the world
    /// config.
    fn dataset(&mut self, path: Option<&PathBuf>) -> Result<Dataset> {
        let d = match path {
            Some(p) => {
                let sha = self.run.record_input(p)?;
                self.run.manifest.dataset_checksum = Some(sha);
                Dataset::load(p)?.with_episode_len(self.cfg.world.steps)?
            }
            None => {
                let d = self.generate()?;
                self.run.manifest.dataset_checksum = Some(crate::harness::manifest::sha256_hex(&dataset_bytes(&d)?));
                d
            }
        };
        if d.field_shape() != self.cfg.world.field {
            return invalid(format!(
                "dataset fields are {:?} but the config declares {:?}",
                d.field_shape(),
                self.cfg.world.field
            ));
        }
        Ok(d)
    }

    fn checkpoint(&mut self, path: Option<&PathBuf>) -> Result<NetParams> {
        let Some(p) = path else {
            return invalid("this command needs --checkpoint <path>");
        };
        let sha = self.run.record_input(p)?;
        let params = load_checkpoint(p)?;
        self.run.manifest.checkpoint_checksums.insert(p.display().to_string(), sha);
        if params.config().field_shape() != self.cfg.world.field {
            return invalid(format!(
                "checkpoint fields are {:?} but the config declares {:?}",
                params.config().field_shape(),
                self.cfg.world.field
            ));
        }
        Ok(params)
    }

    fn write_checkpoint(&mut self, name: &str, p: &NetParams) -> Result<()> {
        let sha = self.run.write(name, &checkpoint_bytes(p)?)?;
        self.run.manifest.checkpoint_checksums.insert(name.to_string(), sha);
        Ok(())
    }

    fn write_metric(&mut self, name: &str, text: &str) -> Result<()> {
        self.run.write(name, text.as_bytes())?;
        if !self.run.manifest.metric_files.iter().any(|f| f == name) {
            self.run.manifest.metric_files.push(name.to_string());
        }
        Ok(())
    }
}

/// Runs one subcommand and writes its outputs and manifest under `args.out`.
pub fn run(args: &CommandArgs) -> Result<RunManifest> {
    let mut ctx = Ctx::new(args)?;
    match args.command {
        Command::GenData => gen_data(&mut ctx)?,
        Command::TrainStage1 => train(&mut ctx, args)?,
        Command::FinetuneStage2 => finetune(&mut ctx, args)?,
        Command::Evaluate => run_evaluate(&mut ctx, args)?,
        Command::VerifyBound => verify_bound(&mut ctx, args)?,
        Command::CheckCrpsW1 => check_crps_w1(&mut ctx)?,
    }
    ctx.run.finish()
}

fn gen_data(ctx: &mut Ctx) -> Result<()> {
    let d = ctx.generate()?;
    let sha = ctx.run.write(DATASET_FILE, &dataset_bytes(&d)?)?;
    ctx.run.manifest.dataset_checksum = Some(sha);
    ctx.run.note("frames", d.len())?;
    ctx.run.note("episode_len", d.episode_len())
}

fn train(ctx: &mut Ctx, args: &CommandArgs) -> Result<()> {
    let data = ctx.dataset(args.dataset.as_ref())?;
    let mut params = NetParams::init(ctx.cfg.net.clone(), &ctx.root.child_named("init"))?;
    ctx.write_checkpoint(CHECKPOINT_FILE, &params)?;
    let cfg = ctx.cfg.stage1.clone();
    let rng = ctx.root.child_named("stage1");
    let log = {
        let run = &mut ctx.run;
        train_stage1(&mut params, &data, &cfg, &rng, |_, p| {
            let sha = run.write(CHECKPOINT_FILE, &checkpoint_bytes(p)?)?;
            run.manifest.checkpoint_checksums.insert(CHECKPOINT_FILE.to_string(), sha);
            Ok(())
        })
    };
    let log = match log {
        Ok(l) => l,
        Err(e) => {
            // keep the last good checkpoint and a manifest that points at it
            ctx.run.note("aborted", e.to_string())?;
            ctx.run.finish()?;
            return Err(e);
        }
    };
    ctx.write_metric("stage1_loss.csv", &log.to_csv())?;
    ctx.run.note("final_epoch_loss", log.epoch_means.last().copied())
}

fn finetune(ctx: &mut Ctx, args: &CommandArgs) -> Result<()> {
    let mut params = ctx.checkpoint(args.checkpoint.as_ref())?;
    let data = ctx.dataset(args.dataset.as_ref())?;
    let stage2 = ctx.cfg.stage2.clone();
    let mut opt = AdamW::for_params(stage2.adamw.clone(), &params);
    let log = finetune_stage2(&mut params, &data, &stage2.schedule, &mut opt, &ctx.root)?;
    ctx.write_checkpoint(STAGE2_CHECKPOINT_FILE, &params)?;
    let mut csv = String::from("stage,horizon,epoch,lr,mean_loss\n");
    for e in &log.epochs {
        csv.push_str(&format!("{},{},{},{},{}\n", e.stage, e.horizon, e.epoch, sig12(e.lr), sig12(e.mean_loss)));
    }
    ctx.write_metric("stage2_loss.csv", &csv)?;
    ctx.run.manifest.nfe.insert("stage2_training".into(), log.nfe);
    ctx.run.note("loss_evaluations", log.loss_evaluations)?;
    ctx.run.note("samples", log.samples)
}

fn oracle_for(ctx: &Ctx) -> Result<AffineOracle> {
    AffineOracle::new(&ctx.cfg.world.kernel)
}

fn run_evaluate(ctx: &mut Ctx, args: &CommandArgs) -> Result<()> {
    let params = match args.oracle {
        true => None,
        false => Some(ctx.checkpoint(args.checkpoint.as_ref())?),
    };
    let data = ctx.dataset(args.dataset.as_ref())?;
    let rng = ctx.root.child_named("eval");
    let eval = match &params {
        Some(p) => evaluate(p, data.stats(), &data, &ctx.cfg.eval, &rng)?,
        None => {
            let oracle = oracle_for(ctx)?;
            evaluate(&oracle, &NormStats::identity(data.field_shape()[0]), &data, &ctx.cfg.eval, &rng)?
        }
    };
    write_evaluation(ctx, &eval, &data)
}

fn write_evaluation(ctx: &mut Ctx, eval: &Evaluation, data: &Dataset) -> Result<()> {
    ctx.write_metric(METRICS_FILE, &eval.report.to_csv())?;
    ctx.run.manifest.nfe.insert("per_rollout".into(), eval.nfe_per_rollout);
    ctx.run.manifest.nfe.insert("total".into(), eval.nfe_total);
    ctx.run.note("initial_frames", &eval.starts)?;
    if ctx.cfg.eval.write_ensemble {
        let s = eval.members.shape();
        let frames = s[0] * s[1] * s[2];
        let fields = eval.members.reshape(&[frames, s[3], s[4], s[5]])?;
        let ens = Dataset::new(fields, data.latitudes().to_vec(), (s[1] * s[2]).max(2))?;
        ctx.run.write("ensemble.bin", &dataset_bytes(&ens)?)?;
        ctx.run.note(
            "ensemble_layout",
            "frames ordered (initialization n, member k, lead l); member k of initialization n draws lead l noise from eval/n/k/l",
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct BoundSidecar<'a> {
    report: &'a BoundReport,
    seed: u64,
    config: &'a TrainConfig,
    resolved_config: String,
}

fn verify_bound(ctx: &mut Ctx, args: &CommandArgs) -> Result<()> {
    let rng = ctx.root.child_named("bound");
    let w = ctx.cfg.world.clone();
    let b = ctx.cfg.bound.clone();
    let report = if args.oracle {
        let oracle = oracle_for(ctx)?;
        let model = ModelKernel::new(&oracle, NormStats::identity(w.field[0]));
        verify_rollout_bound(&model, &w.kernel, &w.initial, w.field, b.horizon, &b.options, &rng)?
    } else {
        let params = ctx.checkpoint(args.checkpoint.as_ref())?;
        let data = ctx.dataset(args.dataset.as_ref())?;
        let model = ModelKernel::new(&params, data.stats().clone());
        verify_rollout_bound(&model, &w.kernel, &w.initial, w.field, b.horizon, &b.options, &rng)?
    };
    ctx.write_metric(BOUND_FILE, &report.to_csv())?;
    let sidecar = BoundSidecar {
        report: &report,
        seed: ctx.cfg.seed,
        config: &ctx.cfg,
        resolved_config: ctx.raw.resolved_text(),
    };
    ctx.run.write("bound.json", serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    ctx.run.note("holds", report.holds())
}

fn check_crps_w1(ctx: &mut Ctx) -> Result<()> {
    let c = &ctx.cfg.crps_w1;
    let members = ctx.root.child_named("crps_w1").normals(c.members).0;
    let (crps, w1) = crps_w1_relation_check(&members, c.truth)?;
    let mut csv = String::from("quantity,value\n");
    csv.push_str(&format!("members,{}\n", c.members));
    csv.push_str(&format!("truth,{}\n", sig12(c.truth)));
    csv.push_str(&format!("crps_paper,{}\n", sig12(crps)));
    csv.push_str(&format!("w1_to_point,{}\n", sig12(w1)));
    csv.push_str(&format!("crps_le_w1,{}\n", crps <= w1));
    ctx.write_metric("crps_w1.csv", &csv)
}
