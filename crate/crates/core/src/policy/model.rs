//! The attention encoder-decoder policy and its three forward modes.
//!
//! One backbone embeds nodes and decodes node probabilities step by step.
//! Depending on the stage, each adapted linear layer runs plain (backbone
//! training), through a Gated-LoRA adapter (per-variant expert
//! fine-tuning), or through the expert mixture (unified training).

use crate::autodiff::{attention, Mask, NodeId, Tensor};
use crate::error::{CoreError, Result};
use crate::policy::config::{PolicyConfig, Stage, CONTEXT_SCALARS};
use crate::policy::features::{context_scalars, customer_features, depot_features};
use crate::policy::layers::{
    gated_lora_forward, mose_combine_per_expert, mose_combine_stacked, routed_alpha_graph,
    stack_expert_tensors, ExpertNodes, EXPERT_COUNT,
};
use crate::policy::store::{uniform_init, Bound, ParamStore};
use crate::rng::StreamRng;
use crate::vrp::env::{feasible_actions, EnvState};
use crate::vrp::instance::ProblemInstance;
use crate::vrp::variant::{Basis, VariantId};

/// One linear layer that can carry adapters: name plus output/input dims.
#[derive(Debug, Clone)]
pub struct AdaptedLayer {
    pub name: String,
    pub d_out: usize,
    pub d_in: usize,
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub cfg: PolicyConfig,
    pub stage: Stage,
    pub store: ParamStore,
}

impl Policy {
    /// Fresh backbone with uniform fan-in initialization.
    pub fn init_backbone(cfg: PolicyConfig, seed: u64) -> Result<Policy> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = StreamRng::new(seed, 0);
        let d = cfg.d_model;

        let lin = |store: &mut ParamStore, rng: &mut StreamRng, name: &str, d_out: usize, d_in: usize| {
            store.insert(format!("{name}.w"), uniform_init(rng, vec![d_out, d_in], d_in));
        };

        store.insert(
            "backbone.node_embed.w",
            uniform_init(&mut rng, vec![d, super::config::CUSTOMER_FEATURES], super::config::CUSTOMER_FEATURES),
        );
        store.insert("backbone.node_embed.b", Tensor::zeros(vec![d]));
        store.insert(
            "backbone.depot_embed.w",
            uniform_init(&mut rng, vec![d, super::config::DEPOT_FEATURES], super::config::DEPOT_FEATURES),
        );
        store.insert("backbone.depot_embed.b", Tensor::zeros(vec![d]));

        for l in 0..cfg.n_layers {
            for proj in ["wq", "wk", "wv", "wo"] {
                lin(&mut store, &mut rng, &format!("backbone.enc{l}.{proj}"), d, d);
            }
            store.insert(format!("backbone.enc{l}.ln1.g"), Tensor::new(vec![d], vec![1.0; d]));
            store.insert(format!("backbone.enc{l}.ln1.b"), Tensor::zeros(vec![d]));
            lin(&mut store, &mut rng, &format!("backbone.enc{l}.ff1"), cfg.d_ff, d);
            lin(&mut store, &mut rng, &format!("backbone.enc{l}.ff2"), d, cfg.d_ff);
            store.insert(format!("backbone.enc{l}.ln2.g"), Tensor::new(vec![d], vec![1.0; d]));
            store.insert(format!("backbone.enc{l}.ln2.b"), Tensor::zeros(vec![d]));
        }

        lin(&mut store, &mut rng, "backbone.dec.context", d, d + CONTEXT_SCALARS);
        for proj in ["wq", "wk", "wv", "wo"] {
            lin(&mut store, &mut rng, &format!("backbone.dec.{proj}"), d, d);
        }
        lin(&mut store, &mut rng, "backbone.ptr.wk", d, d);

        Ok(Policy {
            cfg,
            stage: Stage::Backbone,
            store,
        })
    }

    /// Layers that carry adapters under the current adapt targets.
    pub fn adapted_layers(&self) -> Vec<AdaptedLayer> {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let mut layers = Vec::new();
        for l in 0..cfg.n_layers {
            if cfg.adapt.encoder_mha {
                for proj in ["wq", "wk", "wv", "wo"] {
                    layers.push(AdaptedLayer {
                        name: format!("enc{l}.{proj}"),
                        d_out: d,
                        d_in: d,
                    });
                }
            }
            if cfg.adapt.encoder_ff {
                layers.push(AdaptedLayer {
                    name: format!("enc{l}.ff1"),
                    d_out: cfg.d_ff,
                    d_in: d,
                });
                layers.push(AdaptedLayer {
                    name: format!("enc{l}.ff2"),
                    d_out: d,
                    d_in: cfg.d_ff,
                });
            }
        }
        if cfg.adapt.decoder {
            layers.push(AdaptedLayer {
                name: "dec.context".into(),
                d_out: d,
                d_in: d + CONTEXT_SCALARS,
            });
            for proj in ["wq", "wk", "wv", "wo"] {
                layers.push(AdaptedLayer {
                    name: format!("dec.{proj}"),
                    d_out: d,
                    d_in: d,
                });
            }
        }
        layers
    }

    fn is_adapted(&self, name: &str) -> bool {
        let enc = name.starts_with("enc");
        let dec = name.starts_with("dec.");
        if enc && (name.ends_with("ff1") || name.ends_with("ff2")) {
            self.cfg.adapt.encoder_ff
        } else if enc {
            self.cfg.adapt.encoder_mha
        } else {
            dec && self.cfg.adapt.decoder
        }
    }

    /// Registers the Gated-LoRA adapter set of one expert: `A` uniform,
    /// `B` zero (zero initial delta), gate vector zero (gate opens at 1/2).
    pub fn add_expert_params(&mut self, variant: VariantId, seed: u64) -> Result<()> {
        let basis = expert_basis(variant)?;
        let tag = basis.tag();
        let mut rng = StreamRng::new(seed, 0);
        let r = self.cfg.rank_frozen;
        for layer in self.adapted_layers() {
            let name = &layer.name;
            self.store.insert(
                format!("expert.{tag}.{name}.a"),
                uniform_init(&mut rng, vec![r, layer.d_in], layer.d_in),
            );
            self.store
                .insert(format!("expert.{tag}.{name}.b"), Tensor::zeros(vec![layer.d_out, r]));
            self.store
                .insert(format!("expert.{tag}.{name}.gate"), Tensor::zeros(vec![1, layer.d_in]));
        }
        Ok(())
    }

    /// Registers the unified-stage parameters: one gate matrix per adapted
    /// layer plus the free adapter.
    pub fn add_unified_params(&mut self, seed: u64) {
        let mut rng = StreamRng::new(seed, 0);
        let r = self.cfg.rank_free;
        for layer in self.adapted_layers() {
            let name = &layer.name;
            self.store
                .insert(format!("gate.{name}.w"), Tensor::zeros(vec![5, layer.d_in]));
            self.store.insert(
                format!("free.{name}.a"),
                uniform_init(&mut rng, vec![r, layer.d_in], layer.d_in),
            );
            self.store
                .insert(format!("free.{name}.b"), Tensor::zeros(vec![layer.d_out, r]));
        }
    }

    /// Applies the freeze pattern of the current stage.
    pub fn apply_stage_freezing(&mut self) {
        self.store.unfreeze_all();
        match self.stage {
            Stage::Backbone => {}
            Stage::Expert(_) => {
                self.store.freeze_where(|name| name.starts_with("backbone."));
            }
            Stage::Unified => {
                self.store.freeze_where(|name| {
                    name.starts_with("backbone.") || name.starts_with("expert.")
                });
            }
        }
    }

    /// One linear layer, routed per stage.
    fn layer_forward(
        &self,
        b: &mut Bound,
        x: NodeId,
        name: &str,
        variant: VariantId,
    ) -> Result<NodeId> {
        let w0 = b.param(&format!("backbone.{name}.w"))?;
        if !self.is_adapted(name) {
            return b.g.linear(x, w0, None);
        }
        match self.stage {
            Stage::Backbone => b.g.linear(x, w0, None),
            Stage::Expert(expert_variant) => {
                let tag = expert_basis(expert_variant)?.tag();
                let a = b.param(&format!("expert.{tag}.{name}.a"))?;
                let bb = b.param(&format!("expert.{tag}.{name}.b"))?;
                let gate = b.param(&format!("expert.{tag}.{name}.gate"))?;
                gated_lora_forward(&mut b.g, x, w0, a, bb, gate)
            }
            Stage::Unified => {
                let free = ExpertNodes {
                    a: b.param(&format!("free.{name}.a"))?,
                    b: b.param(&format!("free.{name}.b"))?,
                };
                let gate_w = b.param(&format!("gate.{name}.w"))?;
                let alpha = routed_alpha_graph(
                    &mut b.g,
                    x,
                    gate_w,
                    self.cfg.activation,
                    self.cfg.routing,
                    variant,
                )?;
                if let Some(stats) = b.gate_stats.as_mut() {
                    let values = b.g.value(alpha).data().to_vec();
                    stats.record(&values);
                }
                if b.full_gradients() {
                    // Per-expert path: keeps gradients flowing into the
                    // frozen adapters for finite-difference checks.
                    let mut experts = [ExpertNodes {
                        a: NodeId(0),
                        b: NodeId(0),
                    }; EXPERT_COUNT];
                    for (slot, basis) in Basis::EXPERTS.iter().enumerate() {
                        let tag = basis.tag();
                        experts[slot] = ExpertNodes {
                            a: b.param(&format!("expert.{tag}.{name}.a"))?,
                            b: b.param(&format!("expert.{tag}.{name}.b"))?,
                        };
                    }
                    mose_combine_per_expert(
                        &mut b.g,
                        x,
                        w0,
                        &experts,
                        free,
                        alpha,
                        self.cfg.routing,
                        variant,
                    )
                } else {
                    let (a_stack, b_stack) = b.cached_pair(name, || {
                        let grab = |suffix: &str, tag: &str| {
                            &self
                                .store
                                .get(&format!("expert.{tag}.{name}.{suffix}"))
                                .expect("expert tensors present in unified stage")
                                .value
                        };
                        stack_expert_tensors([
                            (grab("a", "o"), grab("b", "o")),
                            (grab("a", "b"), grab("b", "b")),
                            (grab("a", "l"), grab("b", "l")),
                            (grab("a", "tw"), grab("b", "tw")),
                        ])
                    });
                    mose_combine_stacked(&mut b.g, x, w0, a_stack, b_stack, free, alpha)
                }
            }
        }
    }

    /// Static node embeddings for a batch of same-size, same-variant
    /// instances: `(B*(n+1), d_model)` with the depot at each block start.
    pub fn encode(&self, b: &mut Bound, instances: &[&ProblemInstance]) -> Result<NodeId> {
        let batch = instances.len();
        if batch == 0 {
            return Err(CoreError::Config("empty batch".into()));
        }
        let n = instances[0].n;
        let variant = instances[0].variant;
        if instances.iter().any(|i| i.n != n || i.variant != variant) {
            return Err(CoreError::Config(
                "batched instances must share size and variant".into(),
            ));
        }
        let t = n + 1;

        let cust = b.g.constant(customer_features(instances));
        let dep = b.g.constant(depot_features(instances));
        let new = b.param("backbone.node_embed.w")?;
        let neb = b.param("backbone.node_embed.b")?;
        let dew = b.param("backbone.depot_embed.w")?;
        let deb = b.param("backbone.depot_embed.b")?;
        let cust_emb = b.g.linear(cust, new, Some(neb))?;
        let dep_emb = b.g.linear(dep, dew, Some(deb))?;
        let combined = b.g.concat_rows(dep_emb, cust_emb)?;
        let mut idx = Vec::with_capacity(batch * t);
        for bi in 0..batch {
            idx.push(bi);
            for j in 0..n {
                idx.push(batch + bi * n + j);
            }
        }
        let mut h = b.g.gather_rows(combined, idx)?;

        for l in 0..self.cfg.n_layers {
            let q = self.layer_forward(b, h, &format!("enc{l}.wq"), variant)?;
            let k = self.layer_forward(b, h, &format!("enc{l}.wk"), variant)?;
            let v = self.layer_forward(b, h, &format!("enc{l}.wv"), variant)?;
            let att = attention(&mut b.g, q, k, v, None, batch, t, t, self.cfg.n_heads)?;
            let att_o = self.layer_forward(b, att, &format!("enc{l}.wo"), variant)?;
            let res1 = b.g.add(h, att_o)?;
            let g1 = b.param(&format!("backbone.enc{l}.ln1.g"))?;
            let b1 = b.param(&format!("backbone.enc{l}.ln1.b"))?;
            h = b.g.layer_norm(res1, g1, b1)?;

            let ff_mid = self.layer_forward(b, h, &format!("enc{l}.ff1"), variant)?;
            let ff_act = b.g.softplus(ff_mid);
            let ff_out = self.layer_forward(b, ff_act, &format!("enc{l}.ff2"), variant)?;
            let res2 = b.g.add(h, ff_out)?;
            let g2 = b.param(&format!("backbone.enc{l}.ln2.g"))?;
            let b2 = b.param(&format!("backbone.enc{l}.ln2.b"))?;
            h = b.g.layer_norm(res2, g2, b2)?;
        }
        Ok(h)
    }

    /// Per-batch projections that stay fixed across decode steps.
    pub fn build_cache(
        &self,
        b: &mut Bound,
        embeds: NodeId,
        batch: usize,
        t: usize,
        variant: VariantId,
    ) -> Result<DecodeCache> {
        let dec_k = self.layer_forward(b, embeds, "dec.wk", variant)?;
        let dec_v = self.layer_forward(b, embeds, "dec.wv", variant)?;
        let ptr_w = b.param("backbone.ptr.wk.w")?;
        let ptr_k = b.g.linear(embeds, ptr_w, None)?;
        Ok(DecodeCache {
            embeds,
            dec_k,
            dec_v,
            ptr_k,
            batch,
            t,
        })
    }

    /// Pointer logits for a set of rows. Rows must be instance-major with
    /// the same number of rows per instance. Returns `(logits, mask)`.
    pub fn decode_logits(
        &self,
        b: &mut Bound,
        cache: &DecodeCache,
        instances: &[&ProblemInstance],
        rows: &[DecodeRow],
    ) -> Result<(NodeId, Mask)> {
        let t = cache.t;
        let batch = cache.batch;
        debug_assert_eq!(rows.len() % batch, 0);
        let per_inst = rows.len() / batch;
        let variant = instances[0].variant;

        let mut cur_idx = Vec::with_capacity(rows.len());
        let mut scalars = Vec::with_capacity(rows.len() * CONTEXT_SCALARS);
        let mut keep = Vec::with_capacity(rows.len() * t);
        for row in rows {
            let inst = instances[row.inst_idx];
            cur_idx.push(row.inst_idx * t + row.state.current);
            scalars.extend_from_slice(&context_scalars(row.state, inst));
            let mask = feasible_actions(row.state, inst);
            debug_assert_eq!(mask.len(), t);
            keep.extend_from_slice(&mask);
        }
        let mask = Mask::new(rows.len(), t, keep);

        let cur_emb = b.g.gather_rows(cache.embeds, cur_idx)?;
        let scal = b.g.constant(Tensor::new(vec![rows.len(), CONTEXT_SCALARS], scalars));
        let ctx_in = b.g.concat_cols(cur_emb, scal)?;
        let ctx = self.layer_forward(b, ctx_in, "dec.context", variant)?;
        let q = self.layer_forward(b, ctx, "dec.wq", variant)?;
        let glimpse = attention(
            &mut b.g,
            q,
            cache.dec_k,
            cache.dec_v,
            Some(&mask),
            batch,
            per_inst,
            t,
            self.cfg.n_heads,
        )?;
        let glimpse_o = self.layer_forward(b, glimpse, "dec.wo", variant)?;

        let raw = b.g.bmm_nt(glimpse_o, cache.ptr_k, batch)?;
        let scaled = b
            .g
            .scalar_mul(1.0 / (self.cfg.d_model as f64).sqrt(), raw);
        let squashed = b.g.tanh(scaled);
        let logits = b.g.scalar_mul(self.cfg.logit_clip, squashed);
        Ok((logits, mask))
    }

    /// Probability vector over the `n + 1` nodes for a single state; the
    /// masked entries are exactly zero. One-off convenience over the
    /// batched path.
    pub fn decode_step(
        &self,
        b: &mut Bound,
        cache: &DecodeCache,
        instances: &[&ProblemInstance],
        rows: &[DecodeRow],
    ) -> Result<NodeId> {
        let (logits, mask) = self.decode_logits(b, cache, instances, rows)?;
        b.g.masked_softmax(logits, &mask)
    }
}

/// The non-capacity basis of a single-constraint variant.
pub fn expert_basis(variant: VariantId) -> Result<Basis> {
    let set = variant.basis_set();
    if set.len() != 2 {
        return Err(CoreError::Config(format!(
            "{variant} is not a single-constraint expert variant"
        )));
    }
    Ok(set[1])
}

pub struct DecodeCache {
    pub embeds: NodeId,
    pub dec_k: NodeId,
    pub dec_v: NodeId,
    pub ptr_k: NodeId,
    pub batch: usize,
    pub t: usize,
}

/// One decode row: which instance it belongs to and its current state.
pub struct DecodeRow<'a> {
    pub inst_idx: usize,
    pub state: &'a EnvState,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::config::PolicyConfig;
    use crate::vrp::env::initial_state;
    use crate::vrp::instance::{generate_instance, GenConfig};

    fn tiny_policy() -> Policy {
        Policy::init_backbone(PolicyConfig::tiny(), 99).unwrap()
    }

    #[test]
    fn identical_instances_embed_identically() {
        let inst = generate_instance(5, VariantId::VRPTW, 7, &GenConfig::default()).unwrap();
        let policy = tiny_policy();
        let mut b = Bound::new(&policy.store);
        let e = policy.encode(&mut b, &[&inst, &inst]).unwrap();
        let v = b.g.value(e);
        let t = 6 * policy.cfg.d_model;
        assert_eq!(&v.data()[..t], &v.data()[t..2 * t]);
    }

    #[test]
    fn customer_permutation_permutes_embedding_rows() {
        let inst = generate_instance(5, VariantId::VRPTW, 8, &GenConfig::default()).unwrap();
        let mut permuted = inst.clone();
        // Swap customers 2 and 4 (indices into all per-customer arrays).
        permuted.coords.swap(2, 4);
        permuted.linehaul.swap(2, 4);
        permuted.backhaul.swap(2, 4);
        permuted.tw_beg.swap(2, 4);
        permuted.tw_end.swap(2, 4);
        permuted.tw_dur.swap(2, 4);

        let policy = tiny_policy();
        let d = policy.cfg.d_model;
        let mut b1 = Bound::new(&policy.store);
        let e1 = policy.encode(&mut b1, &[&inst]).unwrap();
        let mut b2 = Bound::new(&policy.store);
        let e2 = policy.encode(&mut b2, &[&permuted]).unwrap();

        let rows1 = b1.g.value(e1).data();
        let rows2 = b2.g.value(e2).data();
        let row = |data: &[f64], i: usize| data[i * d..(i + 1) * d].to_vec();
        for (a, b_) in [(0usize, 0usize), (1, 1), (2, 4), (3, 3), (4, 2), (5, 5)] {
            let ra = row(rows1, a);
            let rb = row(rows2, b_);
            for (x, y) in ra.iter().zip(&rb) {
                assert!((x - y).abs() < 1e-12, "row {a} should map to {b_}");
            }
        }
    }

    #[test]
    fn decode_probabilities_are_masked_and_normalized() {
        let inst = generate_instance(6, VariantId::CVRP, 3, &GenConfig::default()).unwrap();
        let policy = tiny_policy();
        let mut b = Bound::new(&policy.store);
        let e = policy.encode(&mut b, &[&inst]).unwrap();
        let cache = policy.build_cache(&mut b, e, 1, 7, inst.variant).unwrap();
        let state = initial_state(&inst);
        let rows = [DecodeRow {
            inst_idx: 0,
            state: &state,
        }];
        let probs = policy.decode_step(&mut b, &cache, &[&inst], &rows).unwrap();
        let p = b.g.value(probs).data();
        assert_eq!(p[0], 0.0, "depot masked at the initial state");
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn single_feasible_node_gets_probability_one() {
        let inst = generate_instance(3, VariantId::CVRP, 5, &GenConfig::default()).unwrap();
        let policy = tiny_policy();
        let mut state = initial_state(&inst);
        state.visited[1] = true;
        state.visited[2] = true;
        // only customer 3 remains feasible from the depot
        let mut b = Bound::new(&policy.store);
        let e = policy.encode(&mut b, &[&inst]).unwrap();
        let cache = policy.build_cache(&mut b, e, 1, 4, inst.variant).unwrap();
        let rows = [DecodeRow {
            inst_idx: 0,
            state: &state,
        }];
        let probs = policy.decode_step(&mut b, &cache, &[&inst], &rows).unwrap();
        let p = b.g.value(probs).data();
        assert_eq!(p[3], 1.0);
        assert_eq!(p[0] + p[1] + p[2], 0.0);
    }

    #[test]
    fn stage_freezing_patterns() {
        let mut policy = tiny_policy();
        policy.add_expert_params(VariantId::VRPTW, 1).unwrap();
        policy.stage = Stage::Expert(VariantId::VRPTW);
        policy.apply_stage_freezing();
        for (_, p) in policy.store.iter() {
            assert_eq!(p.frozen, p.name.starts_with("backbone."), "{}", p.name);
        }

        for v in [VariantId::OVRP, VariantId::VRPB, VariantId::VRPL] {
            policy.add_expert_params(v, 2).unwrap();
        }
        policy.add_unified_params(3);
        policy.stage = Stage::Unified;
        policy.apply_stage_freezing();
        for (_, p) in policy.store.iter() {
            let should_freeze =
                p.name.starts_with("backbone.") || p.name.starts_with("expert.");
            assert_eq!(p.frozen, should_freeze, "{}", p.name);
        }
    }

    #[test]
    fn expert_adapter_tensor_count() {
        let mut policy = tiny_policy();
        let before = policy.store.len();
        policy.add_expert_params(VariantId::OVRP, 4).unwrap();
        let added = policy.store.len() - before;
        assert_eq!(added, policy.adapted_layers().len() * 3);
    }
}
