//! Nearest-feasible-neighbor construction: the desk-scale reference
//! heuristic for instances too large to enumerate.

use crate::error::{CoreError, Result};
use crate::vrp::env::{feasible_actions, initial_state, is_terminal, step};
use crate::vrp::instance::ProblemInstance;
use crate::vrp::tour::Tour;

/// Repeatedly visits the closest feasible customer, returning to the depot
/// when none remains. Deterministic; distance ties resolve toward the
/// lower index.
pub fn nearest_feasible(inst: &ProblemInstance) -> Result<Tour> {
    let mut state = initial_state(inst);
    let mut actions = Vec::new();
    while !is_terminal(&state, inst) {
        let mask = feasible_actions(&state, inst);
        let mut choice: Option<(usize, f64)> = None;
        for j in 1..=inst.n {
            if mask[j] {
                let d = inst.dist(state.current, j);
                if choice.map_or(true, |(_, best)| d < best) {
                    choice = Some((j, d));
                }
            }
        }
        let action = match choice {
            Some((j, _)) => j,
            None if mask[0] => 0,
            None => return Err(CoreError::NoFeasibleAction),
        };
        actions.push(action);
        state = step(&state, action, inst)?;
    }
    Ok(Tour::from_actions(inst, &actions))
}
