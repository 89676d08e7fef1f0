//! A compositional multi-variant VRP solver stack.
//!
//! The crate covers the full loop at desk scale: instance generation for
//! the sixteen capacity/open/backhaul/duration/time-window variants, a
//! decomposed-state routing environment with exact feasibility masking, a
//! dense-tensor reverse-mode autodiff core, an attention encoder-decoder
//! policy with per-variant Gated-LoRA experts and an adaptive
//! mixture-of-experts aggregation layer, REINFORCE training with a shared
//! multi-start baseline, and an evaluation harness with exhaustive and
//! nearest-neighbor references.

// The tape allocates and drops hundreds of megabytes of activation
// buffers per training batch; the system allocator spends more time in
// the kernel than the math does.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Keep freed pages pooled instead of returning them to the OS between
/// batches. Called once from `Graph::new`.
pub(crate) fn tune_allocator() {
    use std::sync::Once;
    static ONCE: Once = Once::new();
    ONCE.call_once(|| unsafe {
        // mi_option_purge_delay, in milliseconds. Enum index 15 in the
        // vendored mimalloc v2/v3 headers (between eager_commit_delay = 14
        // and use_numa_nodes = 16 in the generated bindings).
        libmimalloc_sys::mi_option_set(15, 600_000);
    });
}

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod policy;
pub mod rng;
pub mod training;
pub mod vrp;

pub use error::{CoreError, Result};
