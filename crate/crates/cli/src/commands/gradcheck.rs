//! `mose gradcheck`: finite-difference verification of the policy graph.

use anyhow::Result;
use serde_json::json;

use mose_core::policy::gradcheck::run_policy_gradcheck;

use super::Ctx;

pub fn run(ctx: &Ctx, threshold: f64) -> Result<bool> {
    let report = run_policy_gradcheck()?;
    for case in &report.cases {
        println!("{:<40} max rel err {:.3e}", case.name, case.max_rel_err);
    }
    let max = report.max_rel_err();
    let ok = max < threshold;
    println!(
        "max relative error: {max:.3e} ({} threshold {threshold:.0e})",
        if ok { "within" } else { "EXCEEDS" }
    );
    if ctx.json {
        println!(
            "{}",
            json!({
                "cases": report.cases.iter().map(|c| json!({
                    "name": c.name,
                    "max_rel_err": c.max_rel_err,
                })).collect::<Vec<_>>(),
                "max_rel_err": max,
                "threshold": threshold,
                "passed": ok,
            })
        );
    }
    Ok(ok)
}
