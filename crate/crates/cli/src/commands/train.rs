//! `mose pretrain | finetune | aggregate`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use mose_core::policy::checkpoint::{load_checkpoint, save_checkpoint};
use mose_core::policy::config::{GateActivation, PolicyConfig, Routing, Stage};
use mose_core::policy::model::Policy;
use mose_core::training::config::{GenConfigOpt, TrainConfig};
use mose_core::training::metrics::MetricsWriter;
use mose_core::training::stages;
use mose_core::vrp::variant::VariantId;

use super::{Ctx, PolicyArgs, TrainArgs};

/// Config-file shape: every training field optional, names matching the
/// training config exactly.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialTrainConfig {
    epochs: Option<usize>,
    instances_per_epoch: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    lr_decay_epochs: Option<Vec<usize>>,
    lr_decay_factor: Option<f64>,
    n: Option<usize>,
    multi_start: Option<usize>,
    seed: Option<u64>,
    gen: Option<GenConfigOpt>,
}

/// Profile defaults, overlaid by the config file, overlaid by flags.
fn resolve_train(ctx: &Ctx, args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match args.profile.as_str() {
        "desk" => TrainConfig::desk(args.seed),
        "quick" => TrainConfig::quick(args.seed),
        other => bail!("unknown profile `{other}` (expected desk or quick)"),
    };
    if let Some(path) = &args.config {
        let path = ctx.path(path);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let partial: PartialTrainConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        macro_rules! apply {
            ($($field:ident),*) => { $( if let Some(v) = partial.$field { cfg.$field = v; } )* };
        }
        apply!(
            epochs,
            instances_per_epoch,
            batch_size,
            lr,
            weight_decay,
            lr_decay_epochs,
            lr_decay_factor,
            n,
            multi_start,
            seed,
            gen
        );
    }
    macro_rules! flag {
        ($($field:ident),*) => { $( if let Some(v) = args.$field { cfg.$field = v; } )* };
    }
    flag!(epochs, instances_per_epoch, batch_size, lr, weight_decay, n, multi_start);
    cfg.seed = args.seed;
    if let Some(v) = &args.gen.tw_intervals {
        if v.len() != 3 {
            bail!("--tw-intervals needs exactly three values");
        }
        cfg.gen.tw_intervals = Some([v[0], v[1], v[2]]);
    }
    if let Some(v) = args.gen.dur_limit_max {
        cfg.gen.dur_limit_max = Some(v);
    }
    if let Some(v) = args.gen.backhaul_prob {
        cfg.gen.backhaul_prob = Some(v);
    }
    if let Some(v) = args.gen.open_prob {
        cfg.gen.open_prob = Some(v);
    }
    if let Some(v) = args.gen.depot_end_time {
        cfg.gen.depot_end_time = Some(v);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_policy(args: &PolicyArgs) -> Result<PolicyConfig> {
    let mut cfg = PolicyConfig::default();
    if let Some(v) = args.d_model {
        cfg.d_model = v;
    }
    if let Some(v) = args.heads {
        cfg.n_heads = v;
    }
    if let Some(v) = args.layers {
        cfg.n_layers = v;
    }
    if let Some(v) = args.d_ff {
        cfg.d_ff = v;
    }
    if let Some(v) = args.rank_frozen {
        cfg.rank_frozen = v;
    }
    if let Some(v) = args.rank_free {
        cfg.rank_free = v;
    }
    if let Some(v) = &args.activation {
        cfg.activation = GateActivation::parse(v)?;
    }
    if let Some(v) = &args.routing {
        cfg.routing = Routing::parse(v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics_writer(ctx: &Ctx, args: &TrainArgs, out: &Path) -> Result<MetricsWriter> {
    let path = match &args.metrics {
        Some(p) => ctx.path(p),
        None => {
            let mut p = ctx.path(out).into_os_string();
            p.push(".metrics.jsonl");
            p.into()
        }
    };
    Ok(MetricsWriter::to_path(&path)?)
}

pub fn pretrain(ctx: &Ctx, out: &Path, train: &TrainArgs, policy: &PolicyArgs) -> Result<bool> {
    let tcfg = resolve_train(ctx, train)?;
    let pcfg = resolve_policy(policy)?;
    let mut metrics = metrics_writer(ctx, train, out)?;
    let trained = stages::pretrain_backbone(&pcfg, &tcfg, &mut metrics)?;
    save_checkpoint(&trained, &ctx.path(out), None)?;
    println!("backbone checkpoint: {}", ctx.path(out).display());
    Ok(true)
}

pub fn finetune(
    ctx: &Ctx,
    backbone: &Path,
    variant: &str,
    out: &Path,
    train: &TrainArgs,
) -> Result<bool> {
    let tcfg = resolve_train(ctx, train)?;
    let variant = VariantId::parse(variant)?;
    let (backbone_policy, _) = load_checkpoint(&ctx.path(backbone))?;
    if backbone_policy.stage != Stage::Backbone {
        bail!("--backbone must point at a backbone-stage checkpoint");
    }
    let mut metrics = metrics_writer(ctx, train, out)?;
    let expert = stages::finetune_expert(&backbone_policy, variant, &tcfg, &mut metrics)?;
    save_checkpoint(&expert, &ctx.path(out), None)?;
    println!("expert checkpoint: {}", ctx.path(out).display());
    Ok(true)
}

pub fn aggregate(
    ctx: &Ctx,
    backbone: &Path,
    experts: &[std::path::PathBuf],
    out: &Path,
    activation: Option<&str>,
    routing: Option<&str>,
    train: &TrainArgs,
) -> Result<bool> {
    let tcfg = resolve_train(ctx, train)?;
    let (mut backbone_policy, _) = load_checkpoint(&ctx.path(backbone))?;
    if backbone_policy.stage != Stage::Backbone {
        bail!("--backbone must point at a backbone-stage checkpoint");
    }
    if let Some(act) = activation {
        backbone_policy.cfg.activation = GateActivation::parse(act)?;
    }
    if let Some(r) = routing {
        backbone_policy.cfg.routing = Routing::parse(r)?;
    }
    if experts.len() != 4 {
        bail!("--experts needs exactly four checkpoints, got {}", experts.len());
    }
    let loaded: Vec<Policy> = experts
        .iter()
        .map(|p| Ok(load_checkpoint(&ctx.path(p))?.0))
        .collect::<Result<_>>()?;
    let refs: Vec<&Policy> = loaded.iter().collect();
    let mut metrics = metrics_writer(ctx, train, out)?;
    let unified = stages::train_unified(&backbone_policy, &refs, &tcfg, &mut metrics)?;
    save_checkpoint(&unified, &ctx.path(out), None)?;
    println!("unified checkpoint: {}", ctx.path(out).display());
    Ok(true)
}
