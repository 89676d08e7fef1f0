//! Policy architecture and adapter configuration.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::vrp::variant::VariantId;

/// Activation of the aggregation gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    /// Convex combination: coefficients sum to one.
    Softmax,
    /// L1-normalized softplus: nonnegative, sums to one, gradients do not
    /// vanish at the simplex corners.
    NormSoftplus,
    /// Independent coefficients in (0,1); no unit-sum constraint.
    Sigmoid,
}

impl GateActivation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "norm_softplus" => Ok(Self::NormSoftplus),
            "sigmoid" => Ok(Self::Sigmoid),
            other => Err(CoreError::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::NormSoftplus => "norm_softplus",
            Self::Sigmoid => "sigmoid",
        }
    }
}

/// Which expert coefficients survive the gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    /// Keep all five coefficients.
    Dense,
    /// Keep the K largest expert coefficients, K = number of non-capacity
    /// bases in the variant; the backbone coefficient is never masked.
    VariantTopK,
    /// Keep exactly the experts whose basis is present in the variant.
    VariantExact,
}

impl Routing {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Self::Dense),
            "variant_topk" => Ok(Self::VariantTopK),
            "variant_exact" => Ok(Self::VariantExact),
            other => Err(CoreError::Config(format!("unknown routing `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Dense => "dense",
            Self::VariantTopK => "variant_topk",
            Self::VariantExact => "variant_exact",
        }
    }
}

/// Training stage / forward mode of the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Plain backbone, every parameter trainable.
    Backbone,
    /// Frozen backbone plus one trainable Gated-LoRA adapter set.
    Expert(VariantId),
    /// Frozen backbone and experts; trainable gate and free adapter.
    Unified,
}

/// Which groups of linear layers carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptTargets {
    pub encoder_mha: bool,
    pub encoder_ff: bool,
    pub decoder: bool,
}

impl Default for AdaptTargets {
    fn default() -> Self {
        Self {
            encoder_mha: true,
            encoder_ff: true,
            decoder: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    /// Pointer logits are `clip * tanh(score)`.
    pub logit_clip: f64,
    pub rank_frozen: usize,
    pub rank_free: usize,
    pub activation: GateActivation,
    pub routing: Routing,
    pub adapt: AdaptTargets,
}

impl Default for PolicyConfig {
    /// Desk-scale backbone: one generic attention encoder-decoder, not a
    /// replication of any published backbone.
    fn default() -> Self {
        Self {
            d_model: 128,
            n_heads: 8,
            n_layers: 3,
            d_ff: 512,
            logit_clip: 10.0,
            rank_frozen: 8,
            rank_free: 8,
            activation: GateActivation::Sigmoid,
            routing: Routing::Dense,
            adapt: AdaptTargets::default(),
        }
    }
}

impl PolicyConfig {
    /// Tiny shape for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            logit_clip: 10.0,
            rank_frozen: 2,
            rank_free: 2,
            activation: GateActivation::Sigmoid,
            routing: Routing::Dense,
            adapt: AdaptTargets::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(CoreError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        let max_rank = self.d_model.min(self.d_ff);
        if self.rank_frozen >= max_rank || self.rank_free >= max_rank {
            return Err(CoreError::Config(format!(
                "adapter ranks ({}, {}) must stay below min(d_model, d_ff) = {max_rank}",
                self.rank_frozen, self.rank_free
            )));
        }
        if self.rank_frozen == 0 || self.rank_free == 0 || self.n_layers == 0 {
            return Err(CoreError::Config("zero-sized architecture".into()));
        }
        Ok(())
    }
}

pub const CUSTOMER_FEATURES: usize = 7;
pub const DEPOT_FEATURES: usize = 3;
pub const CONTEXT_SCALARS: usize = 5;
