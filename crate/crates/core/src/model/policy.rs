use crate::error::{Error, Result};
use crate::identify::{gqa_promote, HeadId, RetrievalHeadSet};
use crate::kvcache::{CompressionParams, HeadPolicy};

use super::spec::ModelSpec;

/// One [`HeadPolicy`] per (layer, query head).
///
/// Query heads that share a KV head must share a policy, and compensation
/// tokens are rejected on ALiBi models.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    num_layers: usize,
    num_heads: usize,
    group_size: usize,
    policies: Vec<HeadPolicy>,
}

impl PolicyTable {
    pub fn new(spec: &ModelSpec, policies: Vec<HeadPolicy>) -> Result<Self> {
        if policies.len() != spec.total_heads() {
            return Err(Error::DimensionMismatch {
                context: "policy table",
                expected: spec.total_heads(),
                actual: policies.len(),
            });
        }
        let group = spec.group_size();
        for (layer, row) in policies.chunks(spec.num_heads).enumerate() {
            for (kv, members) in row.chunks(group).enumerate() {
                if members.iter().any(|p| p != &members[0]) {
                    return Err(Error::Geometry(format!(
                        "layer {layer}: query heads sharing KV head {kv} have different policies"
                    )));
                }
            }
        }
        if spec.positional.is_alibi() && policies.iter().any(|p| matches!(p, HeadPolicy::Compressed(_))) {
            return Err(Error::config(
                "compensation tokens are a RoPE mechanism; use window policies on ALiBi models",
            ));
        }
        Ok(Self {
            num_layers: spec.num_layers,
            num_heads: spec.num_heads,
            group_size: group,
            policies,
        })
    }

    pub fn uniform(spec: &ModelSpec, policy: HeadPolicy) -> Result<Self> {
        Self::new(spec, vec![policy; spec.total_heads()])
    }

    /// Every head keeps its full cache.
    pub fn full(spec: &ModelSpec) -> Self {
        Self::uniform(spec, HeadPolicy::Retrieval).expect("uniform retrieval table is always valid")
    }

    /// Streaming baseline: sinks plus a fixed recent window on every head.
    pub fn window(spec: &ModelSpec, sinks: usize, window: usize) -> Result<Self> {
        Self::uniform(spec, HeadPolicy::Window { sinks, window })
    }

    /// Heads in `set` (widened to whole KV groups) keep a full cache; the
    /// rest are compressed with `params`.
    pub fn razor(spec: &ModelSpec, set: &RetrievalHeadSet, params: CompressionParams) -> Result<Self> {
        Self::from_head_set(spec, set, HeadPolicy::Compressed(params))
    }

    pub fn from_head_set(spec: &ModelSpec, set: &RetrievalHeadSet, rest: HeadPolicy) -> Result<Self> {
        if set.num_layers != spec.num_layers || set.heads_per_layer != spec.num_heads {
            return Err(Error::Geometry(format!(
                "head set is for a {}x{} model, this model is {}x{}",
                set.num_layers, set.heads_per_layer, spec.num_layers, spec.num_heads
            )));
        }
        set.validate()?;
        let promoted = gqa_promote(set, spec.group_size())?;
        let policies = (0..spec.num_layers)
            .flat_map(|l| (0..spec.num_heads).map(move |h| HeadId::new(l, h)))
            .map(|id| if promoted.contains(id) { HeadPolicy::Retrieval } else { rest })
            .collect();
        Self::new(spec, policies)
    }

    pub fn get(&self, layer: usize, head: usize) -> &HeadPolicy {
        &self.policies[layer * self.num_heads + head]
    }

    /// Policy of the KV head `kv_head` (shared by its whole query group).
    pub fn kv_policy(&self, layer: usize, kv_head: usize) -> &HeadPolicy {
        self.get(layer, kv_head * self.group_size)
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn is_all_retrieval(&self) -> bool {
        self.policies.iter().all(HeadPolicy::is_retrieval)
    }

    pub fn retrieval_count(&self) -> usize {
        self.policies.iter().filter(|p| p.is_retrieval()).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = (HeadId, &HeadPolicy)> + '_ {
        self.policies
            .iter()
            .enumerate()
            .map(|(i, p)| (HeadId::new(i / self.num_heads, i % self.num_heads), p))
    }
}
