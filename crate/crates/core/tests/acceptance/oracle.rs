//! Independent brute-force feasibility checker.
//!
//! Re-derives the feasible action set from the raw instance and the
//! action history alone — no shared state with the environment's
//! incremental bookkeeping. Everything (position, clock, subtour length,
//! loads, phase, visitation) is recomputed by replaying the history from
//! scratch on every query.

use mose_core::vrp::instance::ProblemInstance;

const EPS: f64 = 1e-9;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

struct Replay {
    position: usize,
    clock: f64,
    length: f64,
    delivered: f64,
    picked_up: f64,
    backhaul_in_subtour: bool,
    visited: Vec<bool>,
}

fn replay(inst: &ProblemInstance, history: &[usize]) -> Replay {
    let mut r = Replay {
        position: 0,
        clock: 0.0,
        length: 0.0,
        delivered: 0.0,
        picked_up: 0.0,
        backhaul_in_subtour: false,
        visited: vec![false; inst.n + 1],
    };
    for &node in history {
        if node == 0 {
            r.clock = 0.0;
            r.length = 0.0;
            r.delivered = 0.0;
            r.picked_up = 0.0;
            r.backhaul_in_subtour = false;
            r.position = 0;
            continue;
        }
        let d = dist(inst.coords[r.position], inst.coords[node]);
        let arrival = r.clock + d;
        r.clock = arrival.max(inst.tw_beg[node]) + inst.tw_dur[node];
        r.length += d;
        if inst.backhaul[node] < 0.0 {
            r.picked_up += -inst.backhaul[node];
            r.backhaul_in_subtour = true;
        } else {
            r.delivered += inst.linehaul[node];
        }
        r.visited[node] = true;
        r.position = node;
    }
    r
}

/// The five-rule feasibility mask, recomputed from scratch.
pub fn oracle_feasible(inst: &ProblemInstance, history: &[usize]) -> Vec<bool> {
    let r = replay(inst, history);
    let all_served = r.visited[1..].iter().all(|v| *v);
    let mut mask = vec![false; inst.n + 1];

    // Rule 1, depot half: from the depot, the depot itself is only a
    // legal choice once every customer is served.
    mask[0] = if r.position == 0 { all_served } else { true };

    for j in 1..=inst.n {
        if r.visited[j] {
            continue; // rule 1: exactly once
        }
        let d_to = dist(inst.coords[r.position], inst.coords[j]);
        let d_back = dist(inst.coords[j], inst.coords[0]);

        // Rule 5: demand against remaining capacity, linehauls before
        // backhauls inside a subtour.
        if inst.backhaul[j] < 0.0 {
            if -inst.backhaul[j] > inst.capacity - r.picked_up + EPS {
                continue;
            }
        } else {
            if r.backhaul_in_subtour {
                continue;
            }
            if inst.linehaul[j] > inst.capacity - r.delivered + EPS {
                continue;
            }
        }

        // Rule 2: arrive before the service window closes.
        if inst.variant.time_window && r.clock + d_to > inst.tw_end[j] + EPS {
            continue;
        }

        // Rule 3: subtour length within the duration limit.
        if inst.variant.duration_limit && r.length + d_to > inst.dur_limit + EPS {
            continue;
        }

        // Rule 4: closed routes must fit the return leg.
        if !inst.open {
            if inst.variant.time_window {
                let service_end = (r.clock + d_to).max(inst.tw_beg[j]) + inst.tw_dur[j];
                if service_end + d_back > inst.tw_end[0] + EPS {
                    continue;
                }
            }
            if inst.variant.duration_limit && r.length + d_to + d_back > inst.dur_limit + EPS {
                continue;
            }
        }

        mask[j] = true;
    }
    mask
}

/// Episode end from the oracle's point of view.
pub fn oracle_terminal(inst: &ProblemInstance, history: &[usize]) -> bool {
    let r = replay(inst, history);
    r.visited[1..].iter().all(|v| *v) && (inst.open || r.position == 0)
}
