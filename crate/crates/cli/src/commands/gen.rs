//! `mose gen`: deterministic dataset generation.

use std::path::Path;

use anyhow::{bail, Context, Result};
use mose_core::rng::derive_seed;
use mose_core::vrp::files::{write_instance, Manifest, ManifestEntry};
use mose_core::vrp::instance::{generate_instance, GenConfig, ProblemInstance};
use mose_core::vrp::variant::VariantId;

use super::{Ctx, GenCfgArgs};

const GEN_SALT: u64 = 0x6461_7461;

pub fn resolve_gen_cfg(args: &GenCfgArgs) -> Result<GenConfig> {
    let mut cfg = GenConfig::default();
    if let Some(v) = &args.tw_intervals {
        if v.len() != 3 {
            bail!("--tw-intervals needs exactly three values");
        }
        cfg.tw_intervals = [v[0], v[1], v[2]];
    }
    if let Some(v) = args.dur_limit_max {
        cfg.dur_limit_max = v;
    }
    if let Some(v) = args.backhaul_prob {
        cfg.backhaul_prob = v;
    }
    if let Some(v) = args.open_prob {
        cfg.open_prob = v;
    }
    if let Some(v) = args.depot_end_time {
        cfg.depot_end_time = v;
    }
    Ok(cfg)
}

/// Instance for slot `index` of dataset `(seed, variant_spec)`; the seed
/// chain skips the rare generation rejects deterministically.
pub fn dataset_instance(
    seed: u64,
    index: u64,
    n: usize,
    variant: VariantId,
    cfg: &GenConfig,
) -> Result<ProblemInstance> {
    for attempt in 0..64 {
        let inst_seed = derive_seed(seed, &[GEN_SALT, index, attempt]);
        match generate_instance(n, variant, inst_seed, cfg) {
            Ok(inst) => return Ok(inst),
            Err(_) if attempt + 1 < 64 => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!()
}

pub fn run(
    ctx: &Ctx,
    n: usize,
    variant_spec: &str,
    count: usize,
    seed: u64,
    out: &Path,
    gen_args: &GenCfgArgs,
) -> Result<bool> {
    let cfg = resolve_gen_cfg(gen_args)?;
    let out_dir = ctx.path(out);
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let variants: Vec<VariantId> = if variant_spec == "all16" {
        VariantId::all().collect()
    } else {
        vec![VariantId::parse(variant_spec)?]
    };

    let indices: Vec<u64> = (0..count as u64).collect();
    let chunk = indices.len().div_ceil(ctx.jobs.max(1));
    let mut files: Vec<(String, String, String)> = Vec::with_capacity(count);
    let results: Vec<Result<Vec<(String, String, String)>>> = std::thread::scope(|scope| {
        indices
            .chunks(chunk.max(1))
            .map(|slice| {
                let variants = &variants;
                let cfg = &cfg;
                scope.spawn(move || {
                    slice
                        .iter()
                        .map(|&i| {
                            let variant = variants[(i as usize) % variants.len()];
                            let inst = dataset_instance(seed, i, n, variant, cfg)?;
                            let name = format!("inst_{i:05}.vrp");
                            Ok((name, write_instance(&inst), variant.name()))
                        })
                        .collect()
                })
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().expect("generation worker panicked"))
            .collect()
    });
    for r in results {
        files.extend(r?);
    }

    let mut manifest = Manifest::default();
    for (name, text, variant) in &files {
        std::fs::write(out_dir.join(name), text)?;
        manifest.entries.push(ManifestEntry {
            file: name.clone(),
            variant: variant.clone(),
        });
    }
    std::fs::write(out_dir.join("manifest.json"), manifest.to_json())?;
    println!(
        "wrote {} instances to {}",
        files.len(),
        out_dir.display()
    );
    Ok(true)
}
