use mose_core::eval::evaluate::{evaluate, Reference};
use mose_core::policy::config::PolicyConfig;
use mose_core::policy::model::Policy;
use mose_core::rng::derive_seed;
use mose_core::training::config::TrainConfig;
use mose_core::training::metrics::MetricsWriter;
use mose_core::training::rollout::greedy_gate_usage;
use mose_core::training::stages::{finetune_expert, pretrain_backbone, train_unified};
use mose_core::vrp::instance::{generate_instance, GenConfig, ProblemInstance};
use mose_core::vrp::variant::VariantId;

fn set(variant: VariantId, n: usize, count: usize, salt: u64) -> Vec<ProblemInstance> {
    let cfg = GenConfig::default();
    (0..count as u64)
        .map(|i| {
            (0..64)
                .find_map(|a| {
                    generate_instance(n, variant, derive_seed(salt, &[i, a]), &cfg).ok()
                })
                .unwrap()
        })
        .collect()
}

fn cost(policy: &Policy, s: &[ProblemInstance], m: usize) -> f64 {
    evaluate(policy, s, m, 1, Reference::None, 1).unwrap().0.rows[0].mean_cost
}

fn main() {
    let pcfg = PolicyConfig::default();
    let mut tcfg = TrainConfig::desk(777);
    tcfg.epochs = 4;
    tcfg.instances_per_epoch = 500;
    tcfg.lr_decay_epochs = vec![];
    let mut m = MetricsWriter::disabled();

    let held_cvrp = set(VariantId::CVRP, 20, 200, 0xC0);
    let untrained = Policy::init_backbone(pcfg.clone(), 4242).unwrap();
    let u_cost = cost(&untrained, &held_cvrp, 20);
    let t = std::time::Instant::now();
    let backbone = pretrain_backbone(&pcfg, &tcfg, &mut m).unwrap();
    let b_cost = cost(&backbone, &held_cvrp, 20);
    println!("A3-mini: untrained {u_cost:.4} trained {b_cost:.4} ratio {:.3} ({:.0}s)", b_cost / u_cost, t.elapsed().as_secs_f64());

    let mut experts = Vec::new();
    for v in [VariantId::OVRP, VariantId::VRPB, VariantId::VRPL, VariantId::VRPTW] {
        let held = set(v, 20, 200, 0xC1 + v.non_capacity_count() as u64 * 7 + u64::from(v.open));
        let bb = cost(&backbone, &held, 20);
        let t = std::time::Instant::now();
        let ex = finetune_expert(&backbone, v, &tcfg, &mut m).unwrap();
        let ec = cost(&ex, &held, 20);
        println!("A4-mini {v}: backbone {bb:.4} expert {ec:.4} margin {:.2}% ({:.0}s)", (1.0 - ec / bb) * 100.0, t.elapsed().as_secs_f64());
        experts.push((v, ex, held, ec));
    }

    let refs: Vec<&Policy> = experts.iter().map(|(_, e, _, _)| e).collect();
    let t = std::time::Instant::now();
    let unified = train_unified(&backbone, &refs, &tcfg, &mut m).unwrap();
    println!("unified trained ({:.0}s)", t.elapsed().as_secs_f64());
    let uc = cost(&unified, &held_cvrp, 20);
    println!("A5-mini CVRP: unified {uc:.4} vs backbone {b_cost:.4} ratio {:.3}", uc / b_cost);
    for (v, _, held, ec) in &experts {
        let u = cost(&unified, held, 20);
        println!("A5-mini {v}: unified {u:.4} vs specialist {ec:.4} ratio {:.3}", u / ec);
    }

    let vrptw = set(VariantId::VRPTW, 20, 32, 0xC6);
    let ovrp = set(VariantId::OVRP, 20, 32, 0xC7);
    let r1: Vec<&ProblemInstance> = vrptw.iter().collect();
    let r2: Vec<&ProblemInstance> = ovrp.iter().collect();
    let tw1 = greedy_gate_usage(&unified, &r1, 8).unwrap();
    let tw2 = greedy_gate_usage(&unified, &r2, 8).unwrap();
    println!("A6-mini: alpha on VRPTW {:?}", tw1);
    println!("A6-mini: alpha on OVRP  {:?}", tw2);
    println!("A6-mini: TW coeff {:.4} vs {:.4} -> {}", tw1[4], tw2[4], tw1[4] > tw2[4]);
}
