//! Exact optimum by depth-first enumeration with feasibility pruning.
//!
//! Explores every feasible action sequence through the same rule engine
//! the policy rollouts use (including depot returns, which can pay off
//! under time windows because the clock resets), prunes branches whose
//! partial cost already meets the incumbent, and certifies the best leaf
//! by recomputing its cost from the coordinates.

use crate::error::{CoreError, Result};
use crate::eval::nearest::nearest_feasible;
use crate::vrp::env::{feasible_actions, initial_state, is_terminal, step, EnvState};
use crate::vrp::instance::ProblemInstance;
use crate::vrp::tour::{tour_cost_nodes, Tour};

/// Enumeration budget: beyond nine customers the tree is too large.
pub const MAX_EXHAUSTIVE_N: usize = 9;

struct Search<'a> {
    inst: &'a ProblemInstance,
    best_cost: f64,
    best_actions: Vec<usize>,
    stack: Vec<usize>,
}

impl Search<'_> {
    fn dfs(&mut self, state: &EnvState, partial_cost: f64) {
        if partial_cost >= self.best_cost - 1e-12 {
            return;
        }
        if is_terminal(state, self.inst) {
            self.best_cost = partial_cost;
            self.best_actions = self.stack.clone();
            return;
        }
        let mask = feasible_actions(state, self.inst);
        for action in 0..mask.len() {
            if !mask[action] {
                continue;
            }
            let leg = if self.inst.open && action == 0 {
                0.0
            } else {
                self.inst.dist(state.current, action)
            };
            let next = step(state, action, self.inst).expect("masked action must step");
            self.stack.push(action);
            self.dfs(&next, partial_cost + leg);
            self.stack.pop();
        }
    }
}

/// Certified optimal tour for a small instance.
pub fn exhaustive_solve(inst: &ProblemInstance) -> Result<Tour> {
    if inst.n > MAX_EXHAUSTIVE_N {
        return Err(CoreError::Config(format!(
            "exhaustive search is limited to n <= {MAX_EXHAUSTIVE_N}, got {}",
            inst.n
        )));
    }
    // Seed the incumbent with the greedy heuristic to sharpen pruning.
    let seed_tour = nearest_feasible(inst)?;
    let mut search = Search {
        inst,
        best_cost: seed_tour.cost + 1e-12,
        best_actions: seed_tour.nodes[1..].to_vec(),
        stack: Vec::new(),
    };
    let root = initial_state(inst);
    search.dfs(&root, 0.0);

    let tour = Tour::from_actions(inst, &search.best_actions);
    // Certify with a from-scratch cost recomputation.
    let certified = tour_cost_nodes(inst, &tour.nodes);
    debug_assert!((certified - search.best_cost).abs() < 1e-9);
    Ok(Tour {
        cost: certified,
        ..tour
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vrp::instance::{generate_instance, GenConfig};
    use crate::vrp::tour::validate_tour;
    use crate::vrp::variant::VariantId;

    fn single_customer(open: bool) -> ProblemInstance {
        ProblemInstance {
            variant: if open { VariantId::OVRP } else { VariantId::CVRP },
            n: 1,
            seed: 0,
            coords: vec![[0.2, 0.2], [0.2, 0.5]],
            linehaul: vec![0.0, 3.0],
            backhaul: vec![0.0, 0.0],
            capacity: 30.0,
            open,
            dur_limit: f64::INFINITY,
            tw_beg: vec![0.0; 2],
            tw_end: vec![f64::INFINITY; 2],
            tw_dur: vec![0.0; 2],
        }
    }

    #[test]
    fn one_customer_round_trip() {
        let tour = exhaustive_solve(&single_customer(false)).unwrap();
        assert!((tour.cost - 0.6).abs() < 1e-12);
        let tour = exhaustive_solve(&single_customer(true)).unwrap();
        assert!((tour.cost - 0.3).abs() < 1e-12);
    }

    #[test]
    fn colinear_customers_sweep_once() {
        let inst = ProblemInstance {
            variant: VariantId::CVRP,
            n: 3,
            seed: 0,
            coords: vec![[0.1, 0.5], [0.3, 0.5], [0.5, 0.5], [0.7, 0.5]],
            linehaul: vec![0.0, 2.0, 2.0, 2.0],
            backhaul: vec![0.0; 4],
            capacity: 30.0,
            open: false,
            dur_limit: f64::INFINITY,
            tw_beg: vec![0.0; 4],
            tw_end: vec![f64::INFINITY; 4],
            tw_dur: vec![0.0; 4],
        };
        let tour = exhaustive_solve(&inst).unwrap();
        // out and back along the line
        assert!((tour.cost - 1.2).abs() < 1e-12);
        assert_eq!(tour.nodes, vec![0, 1, 2, 3, 0]);
    }

    #[test]
    fn optimum_bounds_the_heuristic_on_every_variant() {
        let cfg = GenConfig::default();
        for variant in VariantId::all() {
            for seed in 0..4 {
                let inst = generate_instance(6, variant, 1000 + seed, &cfg).unwrap();
                let opt = exhaustive_solve(&inst).unwrap();
                assert!(validate_tour(&inst, &opt).passed(), "{variant}");
                let greedy = nearest_feasible(&inst).unwrap();
                assert!(
                    opt.cost <= greedy.cost + 1e-9,
                    "{variant}: optimum {} above greedy {}",
                    opt.cost,
                    greedy.cost
                );
            }
        }
    }

    #[test]
    fn budget_is_enforced() {
        let inst = generate_instance(10, VariantId::CVRP, 1, &GenConfig::default()).unwrap();
        assert!(exhaustive_solve(&inst).is_err());
    }
}
