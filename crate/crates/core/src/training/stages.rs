//! The three-stage pipeline: backbone pretraining on CVRP, per-variant
//! Gated-LoRA expert fine-tuning, and unified gate + free-adapter training
//! over all sixteen variants.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::error::{CoreError, Result};
use crate::policy::config::{PolicyConfig, Stage};
use crate::policy::model::{expert_basis, Policy};
use crate::rng::{derive_seed, StreamRng};
use crate::training::config::TrainConfig;
use crate::training::metrics::{MetricsRecord, MetricsWriter};
use crate::training::optimizer::Adam;
use crate::training::reinforce::reinforce_step;
use crate::vrp::instance::{generate_instance, GenConfig, ProblemInstance};
use crate::vrp::variant::{Basis, VariantId};

const INIT_SALT: u64 = 0x696e_6974;
const INSTANCE_SALT: u64 = 0x6765_6e69;
const SAMPLER_SALT: u64 = 0x7361_6d70;
const SCHEDULE_SALT: u64 = 0x7363_6864;

fn stage_tag(stage: Stage) -> u64 {
    match stage {
        Stage::Backbone => 10,
        Stage::Expert(v) => {
            20 + Basis::EXPERTS
                .iter()
                .position(|b| v.has(*b))
                .unwrap_or(0) as u64
        }
        Stage::Unified => 30,
    }
}

fn stage_name(stage: Stage) -> String {
    match stage {
        Stage::Backbone => "backbone".to_string(),
        Stage::Expert(v) => format!("expert-{}", v.name().to_lowercase()),
        Stage::Unified => "unified".to_string(),
    }
}

enum VariantSchedule {
    Fixed(VariantId),
    UniformAll,
}

/// Deterministic instance draw with a retry chain for the rare
/// generation rejects.
pub fn training_instance(
    root_seed: u64,
    tags: &[u64],
    n: usize,
    variant: VariantId,
    gen_cfg: &GenConfig,
) -> Result<ProblemInstance> {
    for attempt in 0..64 {
        let mut path = tags.to_vec();
        path.push(attempt);
        let seed = derive_seed(root_seed, &path);
        match generate_instance(n, variant, seed, gen_cfg) {
            Ok(inst) => return Ok(inst),
            Err(_) if attempt + 1 < 64 => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!()
}

fn run_stage(
    policy: &mut Policy,
    tcfg: &TrainConfig,
    schedule: VariantSchedule,
    metrics: &mut MetricsWriter,
) -> Result<()> {
    tcfg.validate()?;
    let gen_cfg = tcfg.gen.resolve();
    let tag = stage_tag(policy.stage);
    let name = stage_name(policy.stage);
    let mut optimizer = Adam::new(policy.store.len());
    let mut schedule_rng = StreamRng::new(derive_seed(tcfg.seed, &[tag, SCHEDULE_SALT]), 0);
    let mut instance_counter: u64 = 0;

    for epoch in 1..=tcfg.epochs {
        let epoch_start = Instant::now();
        let lr = tcfg.lr_at(epoch);
        let mut remaining = tcfg.instances_per_epoch;
        let mut batch_idx: u64 = 0;
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut cost_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();

        while remaining > 0 {
            let size = remaining.min(tcfg.batch_size);
            remaining -= size;
            let variant = match schedule {
                VariantSchedule::Fixed(v) => v,
                VariantSchedule::UniformAll => {
                    let bits = schedule_rng.below(16) as u8;
                    VariantId::new(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0, bits & 8 != 0)
                }
            };
            let instances: Vec<ProblemInstance> = (0..size)
                .map(|_| {
                    instance_counter += 1;
                    training_instance(
                        tcfg.seed,
                        &[tag, INSTANCE_SALT, instance_counter],
                        tcfg.n,
                        variant,
                        &gen_cfg,
                    )
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&ProblemInstance> = instances.iter().collect();

            let mut sample_rng = StreamRng::new(
                derive_seed(tcfg.seed, &[tag, SAMPLER_SALT, epoch as u64, batch_idx]),
                0,
            );
            let step = reinforce_step(
                policy,
                &refs,
                tcfg.multi_start,
                &mut optimizer,
                lr,
                tcfg.weight_decay,
                &mut sample_rng,
            )?;
            epoch_loss += step.loss;
            batches += 1;
            let entry = cost_sum.entry(variant.name()).or_insert((0.0, 0));
            entry.0 += step.mean_cost;
            entry.1 += 1;
            batch_idx += 1;
        }

        let mean_cost: BTreeMap<String, f64> = cost_sum
            .into_iter()
            .map(|(k, (sum, cnt))| (k, sum / cnt as f64))
            .collect();
        metrics.append(&MetricsRecord {
            stage: name.clone(),
            epoch,
            mean_cost,
            loss: epoch_loss / batches as f64,
            lr,
            wall_time_secs: epoch_start.elapsed().as_secs_f64(),
        })?;
    }
    Ok(())
}

/// Stage 1: train every backbone parameter on CVRP only.
pub fn pretrain_backbone(
    pcfg: &PolicyConfig,
    tcfg: &TrainConfig,
    metrics: &mut MetricsWriter,
) -> Result<Policy> {
    let mut policy = Policy::init_backbone(pcfg.clone(), derive_seed(tcfg.seed, &[INIT_SALT]))?;
    policy.stage = Stage::Backbone;
    policy.apply_stage_freezing();
    run_stage(&mut policy, tcfg, VariantSchedule::Fixed(VariantId::CVRP), metrics)?;
    Ok(policy)
}

/// Stage 2: freeze the backbone and fine-tune one Gated-LoRA adapter set
/// on a single basis variant.
pub fn finetune_expert(
    backbone: &Policy,
    variant: VariantId,
    tcfg: &TrainConfig,
    metrics: &mut MetricsWriter,
) -> Result<Policy> {
    let basis = expert_basis(variant)?;
    if basis == Basis::Capacity {
        return Err(CoreError::Config(
            "CVRP is the backbone itself, not an expert".into(),
        ));
    }
    let mut policy = backbone.clone();
    policy.add_expert_params(
        variant,
        derive_seed(tcfg.seed, &[INIT_SALT, stage_tag(Stage::Expert(variant))]),
    )?;
    policy.stage = Stage::Expert(variant);
    policy.apply_stage_freezing();
    run_stage(&mut policy, tcfg, VariantSchedule::Fixed(variant), metrics)?;
    Ok(policy)
}

/// Stage 3: assemble the four experts onto the backbone, freeze both, and
/// train the per-layer gates plus the free adapter on all 16 variants.
pub fn train_unified(
    backbone: &Policy,
    experts: &[&Policy],
    tcfg: &TrainConfig,
    metrics: &mut MetricsWriter,
) -> Result<Policy> {
    let mut policy = assemble_unified(backbone, experts, derive_seed(tcfg.seed, &[INIT_SALT, 30]))?;
    run_stage(&mut policy, tcfg, VariantSchedule::UniformAll, metrics)?;
    Ok(policy)
}

/// Merges expert adapter tensors into a unified policy without training.
pub fn assemble_unified(backbone: &Policy, experts: &[&Policy], init_seed: u64) -> Result<Policy> {
    let mut policy = backbone.clone();
    let mut covered = Vec::new();
    for expert in experts {
        if expert.cfg.d_model != policy.cfg.d_model
            || expert.cfg.n_layers != policy.cfg.n_layers
            || expert.cfg.d_ff != policy.cfg.d_ff
            || expert.cfg.n_heads != policy.cfg.n_heads
            || expert.cfg.rank_frozen != policy.cfg.rank_frozen
            || expert.cfg.adapt != policy.cfg.adapt
        {
            return Err(CoreError::Config(
                "expert checkpoint dimensions do not match the backbone".into(),
            ));
        }
        let Stage::Expert(variant) = expert.stage else {
            return Err(CoreError::Config(
                "unified assembly needs expert-stage checkpoints".into(),
            ));
        };
        let basis = expert_basis(variant)?;
        if covered.contains(&basis) {
            return Err(CoreError::Config(format!(
                "duplicate expert for basis {}",
                basis.tag()
            )));
        }
        covered.push(basis);
        let tag = basis.tag();
        let prefix = format!("expert.{tag}.");
        for (_, p) in expert.store.iter() {
            if p.name.starts_with(&prefix) {
                policy.store.insert(p.name.clone(), p.value.clone());
            }
        }
    }
    for basis in Basis::EXPERTS {
        if !covered.contains(&basis) {
            return Err(CoreError::Config(format!(
                "missing expert for basis {}",
                basis.tag()
            )));
        }
    }
    policy.add_unified_params(init_seed);
    policy.stage = Stage::Unified;
    policy.apply_stage_freezing();
    Ok(policy)
}
