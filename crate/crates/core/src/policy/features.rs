//! Feature assembly for the encoder and the decoder context.
//!
//! Attributes of inactive constraint families are zero-filled here, at the
//! feature level; that is intentionally different from the environment,
//! where inactive members are structurally absent. The network always sees
//! the same layout.

use crate::autodiff::Tensor;
use crate::policy::config::{CONTEXT_SCALARS, CUSTOMER_FEATURES, DEPOT_FEATURES};
use crate::vrp::env::EnvState;
use crate::vrp::instance::ProblemInstance;

/// Per-customer rows `(x, y, q_lh/Q, q_bh/Q, tw_beg, tw_end, tw_dur)` for a
/// batch of same-size instances, stacked instance-major: `(B*N, 7)`.
pub fn customer_features(instances: &[&ProblemInstance]) -> Tensor {
    let n = instances[0].n;
    let mut data = Vec::with_capacity(instances.len() * n * CUSTOMER_FEATURES);
    for inst in instances {
        debug_assert_eq!(inst.n, n, "batched instances must share n");
        let tw = inst.variant.time_window;
        for j in 1..=n {
            data.push(inst.coords[j][0]);
            data.push(inst.coords[j][1]);
            data.push(inst.linehaul[j] / inst.capacity);
            data.push(inst.backhaul[j] / inst.capacity);
            if tw {
                data.push(inst.tw_beg[j]);
                data.push(inst.tw_end[j]);
                data.push(inst.tw_dur[j]);
            } else {
                data.extend_from_slice(&[0.0, 0.0, 0.0]);
            }
        }
    }
    Tensor::new(vec![instances.len() * n, CUSTOMER_FEATURES], data)
}

/// Per-depot rows `(x, y, w0_end)`: `(B, 3)`.
pub fn depot_features(instances: &[&ProblemInstance]) -> Tensor {
    let mut data = Vec::with_capacity(instances.len() * DEPOT_FEATURES);
    for inst in instances {
        data.push(inst.coords[0][0]);
        data.push(inst.coords[0][1]);
        data.push(if inst.variant.time_window {
            inst.tw_end[0]
        } else {
            0.0
        });
    }
    Tensor::new(vec![instances.len(), DEPOT_FEATURES], data)
}

/// Dynamic context scalars for one decode row:
/// `(lh/Q, bh/Q, traveled/l_dur, clock/w0_end, open)`, zero where the
/// family is inactive.
pub fn context_scalars(state: &EnvState, inst: &ProblemInstance) -> [f64; CONTEXT_SCALARS] {
    [
        state.basis.remaining_linehaul / inst.capacity,
        state
            .basis
            .remaining_backhaul
            .map_or(0.0, |r| r / inst.capacity),
        state
            .basis
            .traveled
            .map_or(0.0, |l| l / inst.dur_limit),
        state.basis.clock.map_or(0.0, |c| c / inst.tw_end[0]),
        if inst.open { 1.0 } else { 0.0 },
    ]
}
