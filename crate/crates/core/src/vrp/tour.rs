//! Tours, their cost, and an independent rule checker.
//!
//! A tour is a node sequence that starts and ends at the depot, with a
//! depot sentinel closing every subtour. Open-route instances keep the
//! sentinels (the subtour still ends logically at the depot) but the legs
//! into the depot are free.

use crate::vrp::env::le_with_eps;
use crate::vrp::instance::ProblemInstance;

#[derive(Debug, Clone, PartialEq)]
pub struct Tour {
    /// Canonical sequence: `0, ..., 0` with a sentinel after each subtour.
    pub nodes: Vec<usize>,
    pub cost: f64,
}

impl Tour {
    /// Builds the canonical tour from a rollout action sequence (the moves
    /// taken after the initial depot state, in order).
    pub fn from_actions(inst: &ProblemInstance, actions: &[usize]) -> Tour {
        let mut nodes = Vec::with_capacity(actions.len() + 2);
        nodes.push(0);
        nodes.extend_from_slice(actions);
        if *nodes.last().unwrap() != 0 {
            nodes.push(0);
        }
        let cost = tour_cost_nodes(inst, &nodes);
        Tour { nodes, cost }
    }
}

/// Total Euclidean length of a node sequence; legs into the depot are free
/// when the instance is open.
pub fn tour_cost_nodes(inst: &ProblemInstance, nodes: &[usize]) -> f64 {
    nodes
        .windows(2)
        .map(|edge| {
            if inst.open && edge[1] == 0 {
                0.0
            } else {
                inst.dist(edge[0], edge[1])
            }
        })
        .sum()
}

pub fn tour_cost(inst: &ProblemInstance, tour: &Tour) -> f64 {
    tour_cost_nodes(inst, &tour.nodes)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RuleReport {
    pub passed: bool,
    /// Index into `tour.nodes` of the first violation.
    pub first_violation: Option<usize>,
}

impl RuleReport {
    fn ok() -> Self {
        RuleReport {
            passed: true,
            first_violation: None,
        }
    }

    fn fail(&mut self, pos: usize) {
        if self.passed {
            self.passed = false;
            self.first_violation = Some(pos);
        }
    }
}

/// Pass/fail per feasibility rule, plus structural checks on the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub structure: RuleReport,
    /// Rules 1-5 in the order: visit-once/depot, window end, duration
    /// limit, return feasibility, capacity & ordering.
    pub rules: [RuleReport; 5],
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.structure.passed && self.rules.iter().all(|r| r.passed)
    }

    pub fn summary(&self) -> String {
        if self.passed() {
            return "valid".to_string();
        }
        let mut parts = Vec::new();
        if !self.structure.passed {
            parts.push(format!(
                "structure at {}",
                self.structure.first_violation.unwrap_or(0)
            ));
        }
        for (i, r) in self.rules.iter().enumerate() {
            if !r.passed {
                parts.push(format!("rule {} at {}", i + 1, r.first_violation.unwrap_or(0)));
            }
        }
        format!("invalid: {}", parts.join(", "))
    }
}

/// Re-derives every feasibility rule from the tour alone, independently of
/// the environment's incremental state.
pub fn validate_tour(inst: &ProblemInstance, tour: &Tour) -> ValidationReport {
    let mut structure = RuleReport::ok();
    let mut rules = [RuleReport::ok(); 5];
    let nodes = &tour.nodes;

    if nodes.len() < 2 || nodes[0] != 0 || *nodes.last().unwrap() != 0 {
        structure.fail(0);
    }
    if let Some(pos) = nodes.iter().position(|&v| v > inst.n) {
        structure.fail(pos);
        return ValidationReport { structure, rules };
    }

    // Rule 1: every customer exactly once; depot-to-depot moves only once
    // everything is served.
    let mut seen = vec![0usize; inst.node_count()];
    for (pos, &v) in nodes.iter().enumerate() {
        if v >= 1 {
            seen[v] += 1;
            if seen[v] > 1 {
                rules[0].fail(pos);
            }
        }
    }
    if let Some(j) = (1..=inst.n).find(|&j| seen[j] == 0) {
        let _ = j;
        rules[0].fail(nodes.len() - 1);
    }
    let mut served = 0usize;
    for (pos, pair) in nodes.windows(2).enumerate() {
        if pair[0] == 0 && pair[1] == 0 && served < inst.n {
            rules[0].fail(pos + 1);
        }
        if pair[1] >= 1 {
            served += 1;
        }
    }

    // Replay clock, length, and loads subtour by subtour.
    let mut clock = 0.0;
    let mut length = 0.0;
    let mut delivered = 0.0;
    let mut picked_up = 0.0;
    let mut backhaul_seen = false;
    for (pos, pair) in nodes.windows(2).enumerate() {
        let (from, to) = (pair[0], pair[1]);
        let d = inst.dist(from, to);
        let arrival = clock + d;
        if to == 0 {
            if !inst.open {
                length += d;
                if inst.variant.duration_limit && !le_with_eps(length, inst.dur_limit) {
                    rules[2].fail(pos + 1);
                }
                if inst.variant.time_window && !le_with_eps(arrival, inst.tw_end[0]) {
                    rules[3].fail(pos + 1);
                }
            }
            clock = 0.0;
            length = 0.0;
            delivered = 0.0;
            picked_up = 0.0;
            backhaul_seen = false;
            continue;
        }

        length += d;
        if inst.variant.time_window && !le_with_eps(arrival, inst.tw_end[to]) {
            rules[1].fail(pos + 1);
        }
        if inst.variant.duration_limit && !le_with_eps(length, inst.dur_limit) {
            rules[2].fail(pos + 1);
        }
        clock = arrival.max(inst.tw_beg[to]) + inst.tw_dur[to];

        if inst.is_backhaul_customer(to) {
            backhaul_seen = true;
            picked_up += -inst.backhaul[to];
            if !le_with_eps(picked_up, inst.capacity) {
                rules[4].fail(pos + 1);
            }
        } else {
            if backhaul_seen {
                rules[4].fail(pos + 1);
            }
            delivered += inst.linehaul[to];
            if !le_with_eps(delivered, inst.capacity) {
                rules[4].fail(pos + 1);
            }
        }
    }

    ValidationReport { structure, rules }
}
