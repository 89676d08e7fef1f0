//! `mose report`: re-emit a stored JSON report.

use std::path::Path;

use anyhow::{bail, Context, Result};

use mose_core::eval::report::{emit_report, EvalReport, ReportFormat};

use super::Ctx;

pub fn run(ctx: &Ctx, input: &Path, format: &str) -> Result<bool> {
    let format = match format {
        "table" => ReportFormat::Table,
        "csv" => ReportFormat::Csv,
        other => bail!("unknown format `{other}`"),
    };
    let path = ctx.path(input);
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: EvalReport = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    print!("{}", emit_report(&report, format));
    if ctx.json {
        println!("{}", serde_json::to_string(&report)?);
    }
    Ok(true)
}
