//! Augmented multi-start greedy evaluation against a reference solver.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::error::{CoreError, Result};
use crate::eval::exhaustive::{exhaustive_solve, MAX_EXHAUSTIVE_N};
use crate::eval::nearest::nearest_feasible;
use crate::eval::report::{EvalReport, VariantReport};
use crate::policy::model::Policy;
use crate::training::rollout::greedy_best;
use crate::vrp::instance::{dihedral_augment, ProblemInstance};
use crate::vrp::tour::{validate_tour, Tour};

const EVAL_BATCH: usize = 64;

/// Reference solver for gap computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    /// Exhaustive for `n <= 9`, nearest-feasible beyond.
    Auto,
    Exhaustive,
    NearestFeasible,
    /// No reference; gaps report as zero.
    None,
}

impl Reference {
    fn tag(&self, max_n: usize) -> String {
        match self {
            Reference::Auto if max_n <= MAX_EXHAUSTIVE_N => "exhaustive".into(),
            Reference::Auto => "nearest-feasible".into(),
            Reference::Exhaustive => "exhaustive".into(),
            Reference::NearestFeasible => "nearest-feasible".into(),
            Reference::None => "none".into(),
        }
    }

    fn solve(&self, inst: &ProblemInstance) -> Result<Option<f64>> {
        match self {
            Reference::None => Ok(None),
            Reference::Exhaustive => Ok(Some(exhaustive_solve(inst)?.cost)),
            Reference::NearestFeasible => Ok(Some(nearest_feasible(inst)?.cost)),
            Reference::Auto => {
                if inst.n <= MAX_EXHAUSTIVE_N {
                    Ok(Some(exhaustive_solve(inst)?.cost))
                } else {
                    Ok(Some(nearest_feasible(inst)?.cost))
                }
            }
        }
    }
}

/// Best-of `augmentations x multi_start` greedy tours per instance, plus
/// the per-variant report. Tours are validated on the original instance.
pub fn evaluate(
    policy: &Policy,
    dataset: &[ProblemInstance],
    multi_start: usize,
    augmentations: usize,
    reference: Reference,
    jobs: usize,
) -> Result<(EvalReport, Vec<Tour>)> {
    if !(augmentations == 1 || augmentations == 8) {
        return Err(CoreError::Config(
            "augmentations must be 1 or 8 (the dihedral group)".into(),
        ));
    }
    if dataset.is_empty() {
        return Ok((
            EvalReport {
                reference: reference.tag(0),
                multi_start,
                augmentations,
                rows: vec![],
            },
            vec![],
        ));
    }

    // Group by (variant, n): batches must be homogeneous.
    let mut groups: BTreeMap<(String, usize), Vec<usize>> = BTreeMap::new();
    for (i, inst) in dataset.iter().enumerate() {
        groups
            .entry((inst.variant.name(), inst.n))
            .or_default()
            .push(i);
    }

    let mut best: Vec<Option<Tour>> = vec![None; dataset.len()];
    let mut variant_wall: BTreeMap<String, f64> = BTreeMap::new();

    for ((variant, _n), indices) in &groups {
        let start = Instant::now();
        let results = run_group(policy, dataset, indices, multi_start, augmentations, jobs)?;
        for (idx, tour) in indices.iter().zip(results) {
            best[*idx] = Some(tour);
        }
        *variant_wall.entry(variant.clone()).or_insert(0.0) += start.elapsed().as_secs_f64();
    }

    let tours: Vec<Tour> = best.into_iter().map(|t| t.expect("tour per instance")).collect();
    for (inst, tour) in dataset.iter().zip(&tours) {
        let report = validate_tour(inst, tour);
        if !report.passed() {
            return Err(CoreError::InvalidInstance(format!(
                "evaluation produced an invalid tour: {}",
                report.summary()
            )));
        }
    }

    // Reference costs and per-variant aggregation.
    let mut rows: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    for (inst, tour) in dataset.iter().zip(&tours) {
        let entry = rows.entry(inst.variant.name()).or_insert((0.0, 0.0, 0));
        entry.0 += tour.cost;
        if let Some(ref_cost) = reference.solve(inst)? {
            entry.1 += (tour.cost - ref_cost) / ref_cost;
        }
        entry.2 += 1;
    }
    let max_n = dataset.iter().map(|i| i.n).max().unwrap_or(0);
    let report = EvalReport {
        reference: reference.tag(max_n),
        multi_start,
        augmentations,
        rows: rows
            .into_iter()
            .map(|(variant, (cost_sum, gap_sum, count))| VariantReport {
                wall_time_secs: variant_wall.get(&variant).copied().unwrap_or(0.0),
                mean_cost: cost_sum / count as f64,
                mean_gap: gap_sum / count as f64,
                instances: count,
                variant,
            })
            .collect(),
    };
    Ok((report, tours))
}

fn run_group(
    policy: &Policy,
    dataset: &[ProblemInstance],
    indices: &[usize],
    multi_start: usize,
    augmentations: usize,
    jobs: usize,
) -> Result<Vec<Tour>> {
    let jobs = jobs.max(1).min(indices.len());
    if jobs <= 1 {
        return run_slice(policy, dataset, indices, multi_start, augmentations);
    }
    let chunk = indices.len().div_ceil(jobs);
    let slices: Vec<&[usize]> = indices.chunks(chunk).collect();
    let mut results: Vec<Result<Vec<Tour>>> = Vec::with_capacity(slices.len());
    std::thread::scope(|scope| {
        let handles: Vec<_> = slices
            .iter()
            .map(|slice| {
                scope.spawn(move || {
                    run_slice(policy, dataset, slice, multi_start, augmentations)
                })
            })
            .collect();
        for h in handles {
            results.push(h.join().expect("evaluation worker panicked"));
        }
    });
    let mut merged = Vec::with_capacity(indices.len());
    for r in results {
        merged.extend(r?);
    }
    Ok(merged)
}

fn run_slice(
    policy: &Policy,
    dataset: &[ProblemInstance],
    indices: &[usize],
    multi_start: usize,
    augmentations: usize,
) -> Result<Vec<Tour>> {
    let mut best: Vec<Option<Tour>> = vec![None; indices.len()];
    for chunk_start in (0..indices.len()).step_by(EVAL_BATCH) {
        let chunk = &indices[chunk_start..(chunk_start + EVAL_BATCH).min(indices.len())];
        for k in 0..augmentations {
            let augmented: Vec<ProblemInstance> = chunk
                .iter()
                .map(|&i| dihedral_augment(&dataset[i], k))
                .collect();
            let refs: Vec<&ProblemInstance> = augmented.iter().collect();
            let m = multi_start.min(augmented[0].n);
            let tours = greedy_best(policy, &refs, m)?;
            for (slot, tour) in tours.into_iter().enumerate() {
                // Node sequences are coordinate-free: a tour found on the
                // augmented instance maps back to the original unchanged,
                // with equal cost (the symmetry is an isometry).
                let original = &dataset[chunk[slot]];
                let mapped = Tour {
                    cost: crate::vrp::tour::tour_cost_nodes(original, &tour.nodes),
                    nodes: tour.nodes,
                };
                let dst = &mut best[chunk_start + slot];
                if dst.as_ref().map_or(true, |b| mapped.cost < b.cost) {
                    *dst = Some(mapped);
                }
            }
        }
    }
    Ok(best.into_iter().map(|t| t.expect("tour per instance")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::config::PolicyConfig;
    use crate::vrp::instance::{generate_instance, GenConfig};
    use crate::vrp::variant::VariantId;

    fn dataset() -> Vec<ProblemInstance> {
        let cfg = GenConfig::default();
        let mut out = Vec::new();
        for seed in 0..6 {
            out.push(generate_instance(6, VariantId::CVRP, 500 + seed, &cfg).unwrap());
            out.push(generate_instance(6, VariantId::VRPTW, 600 + seed, &cfg).unwrap());
        }
        out
    }

    fn scrub_wall_time(mut r: EvalReport) -> EvalReport {
        for row in &mut r.rows {
            row.wall_time_secs = 0.0;
        }
        r
    }

    #[test]
    fn augmentation_never_hurts_and_repeats_exactly() {
        let policy = Policy::init_backbone(PolicyConfig::tiny(), 17).unwrap();
        let data = dataset();
        let (r1, t1) = evaluate(&policy, &data, 3, 1, Reference::Auto, 1).unwrap();
        let (r8, t8) = evaluate(&policy, &data, 3, 8, Reference::Auto, 1).unwrap();
        for (a, b) in t1.iter().zip(&t8) {
            assert!(b.cost <= a.cost + 1e-12, "8x must dominate 1x");
        }
        let (r8b, t8b) = evaluate(&policy, &data, 3, 8, Reference::Auto, 1).unwrap();
        assert_eq!(scrub_wall_time(r8), scrub_wall_time(r8b));
        assert_eq!(t8, t8b);
        assert_eq!(r1.rows.len(), 2);
    }

    #[test]
    fn reported_cost_bounded_below_by_optimum() {
        let policy = Policy::init_backbone(PolicyConfig::tiny(), 18).unwrap();
        let data = dataset();
        let (report, tours) = evaluate(&policy, &data, 3, 1, Reference::Auto, 1).unwrap();
        for (inst, tour) in data.iter().zip(&tours) {
            let opt = exhaustive_solve(inst).unwrap();
            assert!(tour.cost >= opt.cost - 1e-9);
        }
        assert!(report.rows.iter().all(|r| r.mean_gap >= -1e-12));
        assert_eq!(report.reference, "exhaustive");
    }

    #[test]
    fn jobs_do_not_change_results() {
        let policy = Policy::init_backbone(PolicyConfig::tiny(), 19).unwrap();
        let data = dataset();
        let (_, t1) = evaluate(&policy, &data, 2, 1, Reference::None, 1).unwrap();
        let (_, t2) = evaluate(&policy, &data, 2, 1, Reference::None, 3).unwrap();
        assert_eq!(
            t1.iter().map(|t| t.nodes.clone()).collect::<Vec<_>>(),
            t2.iter().map(|t| t.nodes.clone()).collect::<Vec<_>>()
        );
    }
}
