//! Named parameter tensors with freeze flags, and their per-graph binding.
//!
//! Parameters keep their registration order, which fixes the iteration
//! order everywhere (updates, checkpoints, gradient checks) and keeps the
//! whole pipeline bit-reproducible.

use std::collections::HashMap;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{CoreError, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        self.params.push(Param {
            name: name.clone(),
            value,
            frozen: false,
        });
        let idx = self.params.len() - 1;
        self.index.insert(name, idx);
        idx
    }

    pub fn idx(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| CoreError::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        Ok(&self.params[self.idx(name)?])
    }

    pub fn value(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn set_value(&mut self, idx: usize, value: Tensor) {
        assert_eq!(self.params[idx].value.shape(), value.shape());
        self.params[idx].value = value;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Param)> {
        self.params.iter().enumerate()
    }

    pub fn set_frozen(&mut self, idx: usize, frozen: bool) {
        self.params[idx].frozen = frozen;
    }

    pub fn is_frozen(&self, idx: usize) -> bool {
        self.params[idx].frozen
    }

    /// Freezes every parameter whose name matches the predicate.
    pub fn freeze_where(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            if pred(&p.name) {
                p.frozen = true;
            }
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = false;
        }
    }
}

/// Uniform init over `(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn uniform_init(rng: &mut StreamRng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let len = shape.iter().product();
    Tensor::new(
        shape,
        (0..len).map(|_| rng.uniform_in(-bound, bound)).collect(),
    )
}

/// A graph plus lazily bound parameter leaves. Gradients are later read
/// back per parameter index.
/// Running mean of the routed gate coefficients across layers, tokens,
/// and decode steps.
#[derive(Debug, Clone, Default)]
pub struct GateStats {
    pub sums: [f64; 5],
    pub tokens: usize,
}

impl GateStats {
    pub fn record(&mut self, alpha_rows: &[f64]) {
        for row in alpha_rows.chunks_exact(5) {
            for (s, a) in self.sums.iter_mut().zip(row) {
                *s += a;
            }
        }
        self.tokens += alpha_rows.len() / 5;
    }

    pub fn means(&self) -> [f64; 5] {
        let mut out = self.sums;
        if self.tokens > 0 {
            for v in &mut out {
                *v /= self.tokens as f64;
            }
        }
        out
    }
}

pub struct Bound<'s> {
    pub g: Graph,
    store: &'s ParamStore,
    nodes: Vec<Option<NodeId>>,
    grad_for_frozen: bool,
    stack_cache: HashMap<String, (NodeId, NodeId)>,
    pub gate_stats: Option<GateStats>,
}

impl<'s> Bound<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            nodes: vec![None; store.len()],
            grad_for_frozen: false,
            stack_cache: HashMap::new(),
            gate_stats: None,
        }
    }

    /// Binder that computes gradients even for frozen parameters; the
    /// finite-difference checks compare against every tensor.
    pub fn with_full_gradients(store: &'s ParamStore) -> Self {
        Self {
            grad_for_frozen: true,
            ..Self::new(store)
        }
    }

    /// Whether frozen parameters should receive gradients too.
    pub fn full_gradients(&self) -> bool {
        self.grad_for_frozen
    }

    /// Per-graph cache of derived constant pairs (stacked frozen experts),
    /// keyed by layer name.
    pub fn cached_pair(
        &mut self,
        key: &str,
        build: impl FnOnce() -> (Tensor, Tensor),
    ) -> (NodeId, NodeId) {
        if let Some(ids) = self.stack_cache.get(key) {
            return *ids;
        }
        let (a, b) = build();
        let ids = (self.g.constant(a), self.g.constant(b));
        self.stack_cache.insert(key.to_string(), ids);
        ids
    }

    /// Node for parameter `name`, inserting the leaf on first use.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let idx = self.store.idx(name)?;
        Ok(self.param_idx(idx))
    }

    pub fn param_idx(&mut self, idx: usize) -> NodeId {
        if let Some(id) = self.nodes[idx] {
            return id;
        }
        let value = self.store.value(idx).clone();
        let id = if self.store.is_frozen(idx) && !self.grad_for_frozen {
            self.g.constant(value)
        } else {
            self.g.leaf(value)
        };
        self.nodes[idx] = Some(id);
        id
    }

    /// `(param index, node)` pairs that were actually bound in this graph.
    pub fn bound_params(&self) -> Vec<(usize, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.map(|id| (i, id)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_order_is_stable() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::scalar(1.0));
        store.insert("a", Tensor::scalar(2.0));
        let names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
        assert_eq!(store.idx("a").unwrap(), 1);
    }

    #[test]
    fn binding_reuses_leaves() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(3.0));
        let mut bound = Bound::new(&store);
        let a = bound.param("w").unwrap();
        let b = bound.param("w").unwrap();
        assert_eq!(a, b);
        assert_eq!(bound.bound_params().len(), 1);
    }
}
