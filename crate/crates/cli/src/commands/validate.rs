//! `mose validate`: check a tour file against its instance.

use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;

use mose_core::vrp::files::{instance_hash, read_instance, read_tour};
use mose_core::vrp::tour::{tour_cost_nodes, validate_tour};

use super::Ctx;

pub fn run(ctx: &Ctx, instance: &Path, tour: &Path) -> Result<bool> {
    let inst_path = ctx.path(instance);
    let tour_path = ctx.path(tour);
    let inst_text = std::fs::read_to_string(&inst_path)
        .with_context(|| format!("reading {}", inst_path.display()))?;
    let inst = read_instance(&inst_text)?;
    let (parsed_tour, stored_hash) = read_tour(
        &std::fs::read_to_string(&tour_path)
            .with_context(|| format!("reading {}", tour_path.display()))?,
    )?;

    let mut ok = true;
    let expected_hash = instance_hash(&inst);
    if stored_hash != expected_hash {
        println!("hash: FAIL (tour references a different instance)");
        ok = false;
    } else {
        println!("hash: ok");
    }

    let recomputed = tour_cost_nodes(&inst, &parsed_tour.nodes);
    if (recomputed - parsed_tour.cost).abs() > 1e-9 {
        println!(
            "cost: FAIL (file says {}, recomputed {})",
            parsed_tour.cost, recomputed
        );
        ok = false;
    } else {
        println!("cost: ok ({recomputed})");
    }

    let report = validate_tour(&inst, &parsed_tour);
    let names = [
        "rule 1 (visit once / depot)",
        "rule 2 (window end)",
        "rule 3 (duration limit)",
        "rule 4 (return feasibility)",
        "rule 5 (capacity & ordering)",
    ];
    if !report.structure.passed {
        println!(
            "structure: FAIL at position {}",
            report.structure.first_violation.unwrap_or(0)
        );
        ok = false;
    } else {
        println!("structure: ok");
    }
    for (rule, name) in report.rules.iter().zip(names) {
        if rule.passed {
            println!("{name}: ok");
        } else {
            println!(
                "{name}: FAIL at position {}",
                rule.first_violation.unwrap_or(0)
            );
            ok = false;
        }
    }

    if ctx.json {
        println!(
            "{}",
            json!({
                "hash_ok": stored_hash == expected_hash,
                "cost_ok": (recomputed - parsed_tour.cost).abs() <= 1e-9,
                "structure_ok": report.structure.passed,
                "rules_ok": report.rules.iter().map(|r| r.passed).collect::<Vec<_>>(),
                "passed": ok,
            })
        );
    }
    Ok(ok)
}
