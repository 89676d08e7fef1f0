//! Finite-difference verification of the full policy graph.
//!
//! For each forward mode a small policy decodes a fixed action sequence on
//! a fixed instance; the loss is the summed log-probability of those
//! actions. With actions and masks held constant the loss is smooth in
//! every parameter, so analytic gradients must match central differences.

use crate::autodiff::check::central_diff_max_err;
use crate::autodiff::{NodeId, Tensor};
use crate::error::Result;
use crate::policy::config::{GateActivation, PolicyConfig, Routing, Stage};
use crate::policy::model::{DecodeRow, Policy};
use crate::policy::store::Bound;
use crate::rng::StreamRng;
use crate::training::rollout::{rollout, RolloutMode};
use crate::vrp::env::{initial_state, step};
use crate::vrp::instance::{generate_instance, GenConfig, ProblemInstance};
use crate::vrp::variant::VariantId;

#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub name: String,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub cases: Vec<GradcheckCase>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }
}

fn replay_loss<'p>(
    policy: &'p Policy,
    inst: &ProblemInstance,
    actions: &[usize],
) -> Result<(Bound<'p>, NodeId)> {
    let mut bound = Bound::with_full_gradients(&policy.store);
    let embeds = policy.encode(&mut bound, &[inst])?;
    let cache = policy.build_cache(&mut bound, embeds, 1, inst.n + 1, inst.variant)?;
    let mut state = initial_state(inst);
    let mut total: Option<NodeId> = None;
    for &action in actions {
        let rows = [DecodeRow {
            inst_idx: 0,
            state: &state,
        }];
        let (logits, mask) = policy.decode_logits(&mut bound, &cache, &[inst], &rows)?;
        let logp = bound.g.masked_log_softmax(logits, &mask)?;
        let picked = bound.g.gather_idx(logp, vec![action])?;
        total = Some(match total {
            None => picked,
            Some(acc) => bound.g.add(acc, picked)?,
        });
        state = step(&state, action, inst)?;
    }
    let total = total.expect("non-empty action sequence");
    let loss = bound.g.sum(total);
    Ok((bound, loss))
}

fn check_case(policy: &Policy, inst: &ProblemInstance, h: f64) -> Result<f64> {
    // Freeze the action sequence with a greedy single-start rollout. Six
    // decode steps already cover every op in the graph; more steps only
    // scale the differencing cost.
    let mut rng = StreamRng::new(0, 0);
    let (_, trace) = rollout(policy, &[inst], 1, RolloutMode::Greedy, &mut rng)?;
    let mut actions: Vec<usize> = trace.rows[0].tour.nodes[1..].to_vec();
    actions.truncate(6);

    let params: Vec<Tensor> = policy.store.iter().map(|(_, p)| p.value.clone()).collect();

    let (mut bound, loss) = replay_loss(policy, inst, &actions)?;
    let grads = bound.g.backward(loss)?;
    let analytic: Vec<Tensor> = {
        let bound_nodes = bound.bound_params();
        let mut per: Vec<Tensor> = params
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        for (idx, node) in bound_nodes {
            if let Some(g) = grads.wrt(node) {
                per[idx] = g.clone();
            }
        }
        per
    };

    // The differencing loop changes one tensor per call; track it by
    // buffer identity instead of rewriting the whole store every time.
    let mut perturbed = policy.clone();
    let mut last_changed: Option<usize> = None;
    let mut eval = |ps: &[Tensor]| -> f64 {
        let mut changed = None;
        for (i, t) in ps.iter().enumerate() {
            if !Tensor::same_buffer(t, &params[i]) {
                changed = Some(i);
                perturbed.store.set_value(i, t.clone());
            }
        }
        if let Some(j) = last_changed {
            if changed != Some(j) {
                perturbed.store.set_value(j, params[j].clone());
            }
        }
        last_changed = changed;
        let (bound, loss) = replay_loss(&perturbed, inst, &actions).expect("replay");
        bound.g.value(loss).item()
    };
    Ok(central_diff_max_err(&mut eval, &params, &analytic, h))
}

/// Builds the policy of each forward mode and checks it end to end.
/// `d_model = 16`, six customers, `h = 1e-6`.
pub fn run_policy_gradcheck() -> Result<GradcheckReport> {
    let gen_cfg = GenConfig::default();
    let mut cases = Vec::new();

    let mut base_cfg = PolicyConfig::tiny();
    base_cfg.d_model = 16;

    // Plain backbone on CVRP.
    {
        let policy = Policy::init_backbone(base_cfg.clone(), 101)?;
        let inst = generate_instance(6, VariantId::CVRP, 301, &gen_cfg)?;
        cases.push(GradcheckCase {
            name: "backbone/CVRP".into(),
            max_rel_err: check_case(&policy, &inst, 1e-6)?,
        });
    }

    // Gated-LoRA expert path.
    {
        let mut policy = Policy::init_backbone(base_cfg.clone(), 102)?;
        policy.add_expert_params(VariantId::VRPTW, 202)?;
        nudge_adapters(&mut policy, 0.2);
        policy.stage = Stage::Expert(VariantId::VRPTW);
        policy.apply_stage_freezing();
        let inst = generate_instance(6, VariantId::VRPTW, 302, &gen_cfg)?;
        cases.push(GradcheckCase {
            name: "gated-lora/VRPTW".into(),
            max_rel_err: check_case(&policy, &inst, 1e-6)?,
        });
    }

    // Mixture path: smooth activations; exact routing has a static keep
    // pattern, top-k is excluded because its selection is discontinuous.
    for (activation, routing, variant) in [
        (GateActivation::Sigmoid, Routing::Dense, "OVRPBLTW"),
        (GateActivation::Softmax, Routing::Dense, "VRPTW"),
        (GateActivation::NormSoftplus, Routing::VariantExact, "VRPBL"),
    ] {
        let mut cfg = base_cfg.clone();
        cfg.activation = activation;
        cfg.routing = routing;
        let mut policy = Policy::init_backbone(cfg, 103)?;
        for v in VariantId::basis_variants().into_iter().skip(1) {
            policy.add_expert_params(v, 203)?;
        }
        policy.add_unified_params(204);
        nudge_adapters(&mut policy, 0.2);
        policy.stage = Stage::Unified;
        policy.apply_stage_freezing();
        let variant = VariantId::parse(variant)?;
        let inst = generate_instance(6, variant, 303, &gen_cfg)?;
        cases.push(GradcheckCase {
            name: format!("mose-{}-{}/{}", activation.name(), routing.name(), variant),
            max_rel_err: check_case(&policy, &inst, 1e-6)?,
        });
    }

    Ok(GradcheckReport { cases })
}

/// Zero-initialized adapter tensors (`B`, gates) would hide whole gradient
/// paths behind exact zeros; give them small deterministic values.
fn nudge_adapters(policy: &mut Policy, scale: f64) {
    let mut rng = StreamRng::new(424242, 0);
    let targets: Vec<(usize, Vec<usize>)> = policy
        .store
        .iter()
        .filter(|(_, p)| {
            (p.name.starts_with("expert.") || p.name.starts_with("free.") || p.name.starts_with("gate."))
                && (p.name.ends_with(".b") || p.name.ends_with(".gate") || p.name.ends_with(".w"))
        })
        .map(|(i, p)| (i, p.value.shape().to_vec()))
        .collect();
    for (idx, shape) in targets {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.uniform_in(-scale, scale)).collect();
        policy.store.set_value(idx, Tensor::new(shape, data));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_policy_graph_matches_central_differences() {
        let report = run_policy_gradcheck().unwrap();
        for case in &report.cases {
            assert!(
                case.max_rel_err < 1e-4,
                "{}: rel err {}",
                case.name,
                case.max_rel_err
            );
        }
    }
}
