use mose_core::eval::evaluate::{evaluate, Reference};
use mose_core::policy::checkpoint::save_checkpoint;
use mose_core::policy::config::PolicyConfig;
use mose_core::policy::model::Policy;
use mose_core::rng::derive_seed;
use mose_core::training::config::TrainConfig;
use mose_core::training::metrics::MetricsWriter;
use mose_core::training::stages::{finetune_expert, pretrain_backbone};
use mose_core::vrp::instance::{generate_instance, GenConfig, ProblemInstance};
use mose_core::vrp::variant::VariantId;

fn set(variant: VariantId, n: usize, count: usize, salt: u64) -> Vec<ProblemInstance> {
    let cfg = GenConfig::default();
    (0..count as u64)
        .map(|i| {
            (0..64)
                .find_map(|a| generate_instance(n, variant, derive_seed(salt, &[i, a]), &cfg).ok())
                .unwrap()
        })
        .collect()
}

fn cost(policy: &Policy, s: &[ProblemInstance], m: usize) -> f64 {
    evaluate(policy, s, m, 1, Reference::None, 1).unwrap().0.rows[0].mean_cost
}

fn main() {
    let pcfg = PolicyConfig::default();
    let tcfg = TrainConfig::desk(20260809);
    let mut m = MetricsWriter::to_path(std::path::Path::new("/tmp/a4_probe.metrics.jsonl")).unwrap();
    let t = std::time::Instant::now();
    let backbone = pretrain_backbone(&pcfg, &tcfg, &mut m).unwrap();
    save_checkpoint(&backbone, std::path::Path::new("/tmp/desk_backbone.ckpt"), None).unwrap();
    println!("desk backbone done ({:.0}s)", t.elapsed().as_secs_f64());

    let held_cvrp = set(VariantId::CVRP, 20, 500, 0xE7A1);
    println!("backbone on CVRP: {:.4}", cost(&backbone, &held_cvrp, 20));

    for v in [VariantId::OVRP, VariantId::VRPL] {
        let held = set(v, 20, 500, 0xE7A2);
        let bb = cost(&backbone, &held, 20);
        println!("backbone on {v}: {bb:.4}");
        let t = std::time::Instant::now();
        let expert = finetune_expert(&backbone, v, &tcfg, &mut m).unwrap();
        let ec = cost(&expert, &held, 20);
        println!(
            "{v} expert: {ec:.4} margin {:.2}% ({:.0}s)",
            (1.0 - ec / bb) * 100.0,
            t.elapsed().as_secs_f64()
        );
    }
}
