//! `mose eval`: dataset evaluation with a trained checkpoint.

use std::path::Path;

use anyhow::{bail, Context, Result};

use mose_core::eval::evaluate::{evaluate, Reference};
use mose_core::eval::report::{emit_report, ReportFormat};
use mose_core::policy::checkpoint::load_checkpoint;
use mose_core::vrp::files::{instance_hash, read_instance, write_tour, Manifest};
use mose_core::vrp::instance::ProblemInstance;

use super::Ctx;

pub fn load_dataset(ctx: &Ctx, data: &Path) -> Result<Vec<ProblemInstance>> {
    let data = ctx.path(data);
    let manifest_path = if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.clone()
    };
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let manifest = Manifest::load(&manifest_path)
        .with_context(|| format!("loading {}", manifest_path.display()))?;
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = base.join(&entry.file);
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let inst = read_instance(&text)?;
        if inst.variant.name() != entry.variant {
            bail!(
                "{}: manifest says {} but the file is {}",
                entry.file,
                entry.variant,
                inst.variant
            );
        }
        out.push(inst);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn run(
    ctx: &Ctx,
    ckpt: &Path,
    data: &Path,
    starts: usize,
    aug: usize,
    reference: &str,
    out: Option<&Path>,
    tours_dir: Option<&Path>,
    format: &str,
) -> Result<bool> {
    let reference = match reference {
        "auto" => Reference::Auto,
        "exhaustive" => Reference::Exhaustive,
        "nearest" => Reference::NearestFeasible,
        "none" => Reference::None,
        other => bail!("unknown reference `{other}`"),
    };
    let format = match format {
        "table" => ReportFormat::Table,
        "csv" => ReportFormat::Csv,
        other => bail!("unknown format `{other}`"),
    };

    let (policy, _) = load_checkpoint(&ctx.path(ckpt))?;
    let dataset = load_dataset(ctx, data)?;
    let (report, tours) = evaluate(&policy, &dataset, starts, aug, reference, ctx.jobs)?;

    print!("{}", emit_report(&report, ReportFormat::Table));
    if ctx.json {
        println!("{}", serde_json::to_string(&report)?);
    }
    if let Some(out) = out {
        let out = ctx.path(out);
        let text = if out.extension().and_then(|e| e.to_str()) == Some("json") {
            serde_json::to_string_pretty(&report)? + "\n"
        } else {
            emit_report(&report, format)
        };
        std::fs::write(&out, text)?;
        println!("report: {}", out.display());
    }
    if let Some(dir) = tours_dir {
        let dir = ctx.path(dir);
        std::fs::create_dir_all(&dir)?;
        for (i, (inst, tour)) in dataset.iter().zip(&tours).enumerate() {
            let text = write_tour(tour, &instance_hash(inst));
            std::fs::write(dir.join(format!("tour_{i:05}.tour")), text)?;
        }
        println!("tours: {}", dir.display());
    }
    Ok(true)
}
