//! Adapter arithmetic: LoRA, Gated-LoRA, the aggregation gate, routing,
//! and the mixture forward pass.
//!
//! Each function exists twice where it matters: a tape version used by the
//! policy, and a plain-value reference used by tests (the dense oracle
//! reconstructs the effective per-token matrix and must agree with the
//! tape to ~1e-10).

use crate::autodiff::tensor::{gemm_nt, Tensor};
use crate::autodiff::{sigmoid, softplus, Graph, NodeId};
use crate::error::Result;
use crate::policy::config::{GateActivation, Routing};
use crate::vrp::variant::{Basis, VariantId};

pub const NORM_SOFTPLUS_EPS: f64 = 1e-8;
pub const EXPERT_COUNT: usize = 4;

/// `y = W0 x + beta * B (A x)`.
pub fn lora_forward(
    g: &mut Graph,
    x: NodeId,
    w0: NodeId,
    a: NodeId,
    b: NodeId,
    beta: f64,
) -> Result<NodeId> {
    let base = g.linear(x, w0, None)?;
    let down = g.linear(x, a, None)?;
    let up = g.linear(down, b, None)?;
    let scaled = g.scalar_mul(beta, up);
    g.add(base, scaled)
}

/// `y = sigmoid(<gate_vec, x>) * W0 x + B (A x)`; the gate is a scalar per
/// token that can suppress the frozen backbone path.
pub fn gated_lora_forward(
    g: &mut Graph,
    x: NodeId,
    w0: NodeId,
    a: NodeId,
    b: NodeId,
    gate_vec: NodeId,
) -> Result<NodeId> {
    let base = g.linear(x, w0, None)?;
    let gate_logit = g.linear(x, gate_vec, None)?; // (R, 1)
    let gate = g.sigmoid(gate_logit);
    let gated_base = g.scale_rows(base, gate)?;
    let down = g.linear(x, a, None)?;
    let up = g.linear(down, b, None)?;
    g.add(gated_base, up)
}

/// Coefficients `alpha[0..5]` from the per-token gate, tape version.
pub fn gate_coefficients_graph(
    g: &mut Graph,
    x: NodeId,
    gate_w: NodeId,
    activation: GateActivation,
) -> Result<NodeId> {
    let logits = g.linear(x, gate_w, None)?; // (R, 5)
    match activation {
        GateActivation::Softmax => {
            let rows = g.value(logits).rows();
            let cols = g.value(logits).cols();
            let mask = crate::autodiff::Mask::all_true(rows, cols);
            g.masked_softmax(logits, &mask)
        }
        GateActivation::NormSoftplus => {
            let sp = g.softplus(logits);
            let denom = g.row_sum(sp);
            // The epsilon floors the denominator (vanishing-sum guard)
            // rather than shifting it, so the coefficients sum to exactly
            // one whenever the softplus mass is nondegenerate.
            let denom = g.max_scalar(NORM_SOFTPLUS_EPS, denom);
            let inv = g.recip(denom);
            g.scale_rows(sp, inv)
        }
        GateActivation::Sigmoid => Ok(g.sigmoid(logits)),
    }
}

/// Plain-value reference of the gate: `alpha = act(W_G h)`.
pub fn gate_coefficients(gate_w: &Tensor, h: &[f64], activation: GateActivation) -> [f64; 5] {
    assert_eq!(gate_w.shape(), &[5, h.len()]);
    let mut logits = [0.0; 5];
    gemm_nt(1, h.len(), 5, h, gate_w.data(), 0.0, &mut logits);
    match activation {
        GateActivation::Softmax => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut out = [0.0; 5];
            let mut total = 0.0;
            for (o, l) in out.iter_mut().zip(&logits) {
                *o = (l - max).exp();
                total += *o;
            }
            for o in &mut out {
                *o /= total;
            }
            out
        }
        GateActivation::NormSoftplus => {
            let mut out = [0.0; 5];
            let mut total = 0.0;
            for (o, l) in out.iter_mut().zip(&logits) {
                *o = softplus(*l);
                total += *o;
            }
            let total = total.max(NORM_SOFTPLUS_EPS);
            for o in &mut out {
                *o /= total;
            }
            out
        }
        GateActivation::Sigmoid => {
            let mut out = [0.0; 5];
            for (o, l) in out.iter_mut().zip(&logits) {
                *o = sigmoid(*l);
            }
            out
        }
    }
}

/// Keep pattern for one coefficient row. `alpha[0]` (the backbone) always
/// survives.
pub fn route_keep(alpha: &[f64], routing: Routing, variant: VariantId) -> [bool; 5] {
    debug_assert_eq!(alpha.len(), 5);
    match routing {
        Routing::Dense => [true; 5],
        Routing::VariantExact => {
            let mut keep = [true, false, false, false, false];
            for (slot, basis) in Basis::EXPERTS.iter().enumerate() {
                keep[slot + 1] = variant.has(*basis);
            }
            keep
        }
        Routing::VariantTopK => {
            let k = variant.non_capacity_count();
            let mut keep = [true, false, false, false, false];
            if k > 0 {
                // Sort expert slots by value descending, ties toward the
                // lower index.
                let mut order: Vec<usize> = (1..5).collect();
                order.sort_by(|&i, &j| {
                    alpha[j]
                        .partial_cmp(&alpha[i])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(i.cmp(&j))
                });
                for &slot in order.iter().take(k) {
                    keep[slot] = true;
                }
            }
            keep
        }
    }
}

/// Plain-value routing: zeroes the dropped coefficients.
pub fn route(alpha: [f64; 5], routing: Routing, variant: VariantId) -> [f64; 5] {
    let keep = route_keep(&alpha, routing, variant);
    let mut out = alpha;
    for (o, k) in out.iter_mut().zip(keep) {
        if !k {
            *o = 0.0;
        }
    }
    out
}

/// Tape routing over a coefficient matrix `(R, 5)`. The keep pattern is
/// derived from forward values and treated as constant under
/// differentiation.
pub fn route_graph(
    g: &mut Graph,
    alpha: NodeId,
    routing: Routing,
    variant: VariantId,
) -> Result<NodeId> {
    if matches!(routing, Routing::Dense) {
        return Ok(alpha);
    }
    let values = g.value(alpha).data().to_vec();
    let rows = g.value(alpha).rows();
    let mut keep = Vec::with_capacity(rows * 5);
    for row in 0..rows {
        let row_keep = route_keep(&values[row * 5..(row + 1) * 5], routing, variant);
        keep.extend_from_slice(&row_keep);
    }
    g.keep_mask(alpha, keep)
}

/// Adapter tensors of one expert for one adapted layer.
#[derive(Clone, Copy)]
pub struct ExpertNodes {
    pub a: NodeId,
    pub b: NodeId,
}

/// Routed per-token coefficients: `route(act(W_G x))`, shape `(R, 5)`.
pub fn routed_alpha_graph(
    g: &mut Graph,
    x: NodeId,
    gate_w: NodeId,
    activation: GateActivation,
    routing: Routing,
    variant: VariantId,
) -> Result<NodeId> {
    let raw = gate_coefficients_graph(g, x, gate_w, activation)?;
    route_graph(g, raw, routing, variant)
}

/// Combines backbone, experts, and the free adapter under precomputed
/// routed coefficients.
#[allow(clippy::too_many_arguments)]
pub fn mose_combine_per_expert(
    g: &mut Graph,
    x: NodeId,
    w0: NodeId,
    experts: &[ExpertNodes; EXPERT_COUNT],
    free: ExpertNodes,
    alpha: NodeId,
    routing: Routing,
    variant: VariantId,
) -> Result<NodeId> {
    let base = g.linear(x, w0, None)?;
    let alpha0 = g.col_slice(alpha, 0)?;
    let mut y = g.scale_rows(base, alpha0)?;

    for (slot, expert) in experts.iter().enumerate() {
        // Exact routing zeroes absent-basis experts for every token; skip
        // their matmuls outright.
        if matches!(routing, Routing::VariantExact) && !variant.has(Basis::EXPERTS[slot]) {
            continue;
        }
        let down = g.linear(x, expert.a, None)?;
        let up = g.linear(down, expert.b, None)?;
        let ai = g.col_slice(alpha, slot + 1)?;
        let term = g.scale_rows(up, ai)?;
        y = g.add(y, term)?;
    }

    let down = g.linear(x, free.a, None)?;
    let up = g.linear(down, free.b, None)?;
    g.add(y, up)
}

/// Stacked-expert combine; see [`mose_forward_stacked`].
pub fn mose_combine_stacked(
    g: &mut Graph,
    x: NodeId,
    w0: NodeId,
    a_stack: NodeId,
    b_stack: NodeId,
    free: ExpertNodes,
    alpha: NodeId,
) -> Result<NodeId> {
    let base = g.linear(x, w0, None)?;
    let alpha0 = g.col_slice(alpha, 0)?;
    let mut y = g.scale_rows(base, alpha0)?;

    let down = g.linear(x, a_stack, None)?; // (R, 4r)
    let expert_alpha = g.cols_range(alpha, 1, 5)?; // (R, 4)
    let scaled = g.scale_col_blocks(down, expert_alpha)?;
    let up = g.linear(scaled, b_stack, None)?;
    y = g.add(y, up)?;

    let free_down = g.linear(x, free.a, None)?;
    let free_up = g.linear(free_down, free.b, None)?;
    g.add(y, free_up)
}

/// Mixture forward pass of one adapted linear layer:
/// `y = alpha0 W0 x + sum_i alpha_i B_i A_i x + B_free A_free x`,
/// with `alpha = route(act(W_G x))` per token. Expert gate vectors from
/// the fine-tuning stage stay out of this path.
#[allow(clippy::too_many_arguments)]
pub fn mose_forward_graph(
    g: &mut Graph,
    x: NodeId,
    w0: NodeId,
    experts: &[ExpertNodes; EXPERT_COUNT],
    free: ExpertNodes,
    gate_w: NodeId,
    activation: GateActivation,
    routing: Routing,
    variant: VariantId,
) -> Result<NodeId> {
    let alpha = routed_alpha_graph(g, x, gate_w, activation, routing, variant)?;
    mose_combine_per_expert(g, x, w0, experts, free, alpha, routing, variant)
}

/// Mixture forward with the four frozen experts pre-stacked into one
/// down-projection `(4r, d2)` and one up-projection `(d1, 4r)` constant.
/// Exact same function as [`mose_forward_graph`] (the per-block scaling
/// commutes with the block-diagonal stack), at a fraction of the ops and
/// activations. Only valid while the experts are frozen: no gradient
/// reaches the stacked constants.
#[allow(clippy::too_many_arguments)]
pub fn mose_forward_stacked(
    g: &mut Graph,
    x: NodeId,
    w0: NodeId,
    a_stack: NodeId,
    b_stack: NodeId,
    free: ExpertNodes,
    gate_w: NodeId,
    activation: GateActivation,
    routing: Routing,
    variant: VariantId,
) -> Result<NodeId> {
    let alpha = routed_alpha_graph(g, x, gate_w, activation, routing, variant)?;
    mose_combine_stacked(g, x, w0, a_stack, b_stack, free, alpha)
}

/// Stacks four expert adapters into one block pair: `A` blocks rowwise
/// into `(4r, d2)`, `B` blocks columnwise into `(d1, 4r)`, expert slot
/// order preserved.
pub fn stack_expert_tensors(experts: [(&Tensor, &Tensor); EXPERT_COUNT]) -> (Tensor, Tensor) {
    let r = experts[0].0.shape()[0];
    let d2 = experts[0].0.shape()[1];
    let d1 = experts[0].1.shape()[0];
    let mut a = Vec::with_capacity(EXPERT_COUNT * r * d2);
    for (ea, _) in &experts {
        assert_eq!(ea.shape(), &[r, d2]);
        a.extend_from_slice(ea.data());
    }
    let mut b = vec![0.0; d1 * EXPERT_COUNT * r];
    for (slot, (_, eb)) in experts.iter().enumerate() {
        assert_eq!(eb.shape(), &[d1, r]);
        for i in 0..d1 {
            for t in 0..r {
                b[i * EXPERT_COUNT * r + slot * r + t] = eb.data()[i * r + t];
            }
        }
    }
    (
        Tensor::new(vec![EXPERT_COUNT * r, d2], a),
        Tensor::new(vec![d1, EXPERT_COUNT * r], b),
    )
}

/// Dense oracle: materializes the effective matrix
/// `M = alpha0 W0 + sum_i alpha_i B_i A_i + B_free A_free` for one token
/// and applies it. Quadratic and slow; test use only.
#[allow(clippy::too_many_arguments)]
pub fn mose_forward_dense_oracle(
    h: &[f64],
    w0: &Tensor,
    experts: &[(Tensor, Tensor); EXPERT_COUNT],
    free: &(Tensor, Tensor),
    gate_w: &Tensor,
    activation: GateActivation,
    routing: Routing,
    variant: VariantId,
) -> Vec<f64> {
    let d1 = w0.shape()[0];
    let d2 = w0.shape()[1];
    assert_eq!(h.len(), d2);
    let alpha = route(gate_coefficients(gate_w, h, activation), routing, variant);

    let mut m = vec![0.0; d1 * d2];
    for (mi, wi) in m.iter_mut().zip(w0.data()) {
        *mi = alpha[0] * wi;
    }
    let mut add_product = |b: &Tensor, a: &Tensor, scale: f64| {
        let r = a.shape()[0];
        debug_assert_eq!(b.shape(), &[d1, r]);
        debug_assert_eq!(a.shape(), &[r, d2]);
        for i in 0..d1 {
            for j in 0..d2 {
                let mut acc = 0.0;
                for t in 0..r {
                    acc += b.data()[i * r + t] * a.data()[t * d2 + j];
                }
                m[i * d2 + j] += scale * acc;
            }
        }
    };
    for (slot, (a, b)) in experts.iter().enumerate() {
        add_product(b, a, alpha[slot + 1]);
    }
    add_product(&free.1, &free.0, 1.0);

    let mut out = vec![0.0; d1];
    for i in 0..d1 {
        out[i] = crate::autodiff::tensor::dot(&m[i * d2..(i + 1) * d2], h);
    }
    out
}
