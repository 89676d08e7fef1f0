//! Multi-start rollouts through the environment.
//!
//! Each instance decodes `M` trajectories whose first customers are forced
//! to be distinct (starts 1..=M). Rows advance in lockstep; rows whose
//! episode already ended keep taking the only feasible action (the depot)
//! with probability one, which contributes exactly zero log-probability,
//! and their recorded action list is truncated at the step the episode
//! ended.

use crate::error::{CoreError, Result};
use crate::policy::model::{DecodeRow, Policy};
use crate::policy::store::Bound;
use crate::rng::StreamRng;
use crate::vrp::env::{feasible_actions, initial_state, is_terminal, step, EnvState};
use crate::vrp::instance::ProblemInstance;
use crate::vrp::tour::Tour;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    Greedy,
    Sample,
}

/// One trajectory of a rollout batch.
#[derive(Debug, Clone)]
pub struct RolloutRow {
    pub inst_idx: usize,
    pub start: usize,
    /// False when the forced first customer was infeasible; the row is
    /// excluded from costs and the baseline.
    pub alive: bool,
    pub tour: Tour,
    pub cost: f64,
}

/// Rollout output tied to the graph that produced it.
pub struct RolloutTrace {
    /// Sum of per-step log-probabilities per row, shape `(rows)`.
    pub total_logp: crate::autodiff::NodeId,
    pub rows: Vec<RolloutRow>,
    pub multi_start: usize,
}

/// Decodes `multi_start` trajectories per instance on one tape.
///
/// All instances must share size and variant. Deterministic for a given
/// `(policy, instances, mode, rng state)`.
pub fn rollout<'s>(
    policy: &'s Policy,
    instances: &[&ProblemInstance],
    multi_start: usize,
    mode: RolloutMode,
    rng: &mut StreamRng,
) -> Result<(Bound<'s>, RolloutTrace)> {
    rollout_inner(policy, instances, multi_start, mode, rng, false)
}

/// Greedy rollout that also reports the mean routed gate coefficient per
/// basis slot `(C, O, B, L, TW)`, averaged over layers, tokens, and steps.
/// Unified-stage policies only.
pub fn greedy_gate_usage(
    policy: &Policy,
    instances: &[&ProblemInstance],
    multi_start: usize,
) -> Result<[f64; 5]> {
    let mut rng = StreamRng::new(0, 0);
    let (bound, _) = rollout_inner(
        policy,
        instances,
        multi_start,
        RolloutMode::Greedy,
        &mut rng,
        true,
    )?;
    Ok(bound
        .gate_stats
        .as_ref()
        .map(|s| s.means())
        .unwrap_or_default())
}

fn rollout_inner<'s>(
    policy: &'s Policy,
    instances: &[&ProblemInstance],
    multi_start: usize,
    mode: RolloutMode,
    rng: &mut StreamRng,
    collect_gate_stats: bool,
) -> Result<(Bound<'s>, RolloutTrace)> {
    let batch = instances.len();
    if batch == 0 {
        return Err(CoreError::Config("empty rollout batch".into()));
    }
    let n = instances[0].n;
    if multi_start == 0 || multi_start > n {
        return Err(CoreError::Config(format!(
            "multi_start {multi_start} must be in 1..={n}"
        )));
    }
    let t = n + 1;
    let rows_total = batch * multi_start;

    let mut bound = Bound::new(&policy.store);
    if collect_gate_stats {
        bound.gate_stats = Some(Default::default());
    }
    let embeds = policy.encode(&mut bound, instances)?;
    let cache = policy.build_cache(&mut bound, embeds, batch, t, instances[0].variant)?;

    let mut states: Vec<EnvState> = Vec::with_capacity(rows_total);
    let mut alive = vec![true; rows_total];
    let mut done_at: Vec<Option<usize>> = vec![None; rows_total];
    let mut actions: Vec<Vec<usize>> = vec![Vec::new(); rows_total];
    for inst in instances {
        for _ in 0..multi_start {
            states.push(initial_state(inst));
        }
    }

    let mut total_logp: Option<crate::autodiff::NodeId> = None;
    let mut step_idx = 0usize;
    loop {
        let all_done = (0..rows_total).all(|r| done_at[r].is_some());
        if all_done {
            break;
        }

        let decode_rows: Vec<DecodeRow> = (0..rows_total)
            .map(|r| DecodeRow {
                inst_idx: r / multi_start,
                state: &states[r],
            })
            .collect();
        let (logits, mask) = policy.decode_logits(&mut bound, &cache, instances, &decode_rows)?;
        let logp = bound.g.masked_log_softmax(logits, &mask)?;

        // Choose one action per row from the forward values.
        let logp_values = bound.g.value(logp).data().to_vec();
        let mut chosen = Vec::with_capacity(rows_total);
        for r in 0..rows_total {
            let inst = instances[r / multi_start];
            let row_logp = &logp_values[r * t..(r + 1) * t];
            let action = if done_at[r].is_some() {
                0
            } else if step_idx == 0 && multi_start >= 2 {
                // Forced distinct first customer per start.
                let forced = (r % multi_start) + 1;
                let feasible = feasible_actions(&states[r], inst);
                if feasible[forced] {
                    forced
                } else {
                    alive[r] = false;
                    eprintln!(
                        "warning: dropped start {forced} on instance {} ({}): forced first move infeasible",
                        r / multi_start,
                        inst.variant
                    );
                    pick(row_logp, mode, rng)
                }
            } else {
                pick(row_logp, mode, rng)
            };
            chosen.push(action);
        }

        // Forced first moves are conditioning, not decisions; they carry no
        // log-probability into the objective.
        let forced_step = step_idx == 0 && multi_start >= 2;
        if !forced_step {
            let step_logp = bound.g.gather_idx(logp, chosen.clone())?;
            total_logp = Some(match total_logp {
                None => step_logp,
                Some(acc) => bound.g.add(acc, step_logp)?,
            });
        }

        for r in 0..rows_total {
            let inst = instances[r / multi_start];
            states[r] = step(&states[r], chosen[r], inst)?;
            if done_at[r].is_none() {
                actions[r].push(chosen[r]);
                if is_terminal(&states[r], inst) {
                    done_at[r] = Some(step_idx + 1);
                }
            }
        }
        step_idx += 1;
        if step_idx > 2 * t + 2 {
            return Err(CoreError::NoFeasibleAction);
        }
    }

    let rows: Vec<RolloutRow> = (0..rows_total)
        .map(|r| {
            let inst = instances[r / multi_start];
            let tour = Tour::from_actions(inst, &actions[r]);
            let cost = tour.cost;
            RolloutRow {
                inst_idx: r / multi_start,
                start: r % multi_start,
                alive: alive[r],
                tour,
                cost,
            }
        })
        .collect();

    Ok((
        bound,
        RolloutTrace {
            total_logp: total_logp.expect("at least one decode step"),
            rows,
            multi_start,
        },
    ))
}

/// Action choice from one row of log-probabilities. Greedy breaks ties
/// toward the lowest node index; sampling draws from exp(logp).
fn pick(row_logp: &[f64], mode: RolloutMode, rng: &mut StreamRng) -> usize {
    match mode {
        RolloutMode::Greedy => {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (j, v) in row_logp.iter().enumerate() {
                if *v > best_v {
                    best_v = *v;
                    best = j;
                }
            }
            best
        }
        RolloutMode::Sample => {
            let weights: Vec<f64> = row_logp.iter().map(|v| v.exp()).collect();
            rng.weighted_index(&weights)
        }
    }
}

/// Greedy costs without keeping the tape: `(best tour, best cost)` per
/// instance over `multi_start` starts.
pub fn greedy_best(
    policy: &Policy,
    instances: &[&ProblemInstance],
    multi_start: usize,
) -> Result<Vec<Tour>> {
    let mut rng = StreamRng::new(0, 0); // unused by greedy
    let (_, trace) = rollout(policy, instances, multi_start, RolloutMode::Greedy, &mut rng)?;
    let mut best: Vec<Option<Tour>> = vec![None; instances.len()];
    for row in trace.rows {
        if !row.alive {
            continue;
        }
        let slot = &mut best[row.inst_idx];
        if slot.as_ref().map_or(true, |t| row.cost < t.cost) {
            *slot = Some(row.tour);
        }
    }
    best.into_iter()
        .enumerate()
        .map(|(i, t)| {
            t.ok_or_else(|| {
                CoreError::Config(format!("instance {i}: every start was dropped"))
            })
        })
        .collect()
}
