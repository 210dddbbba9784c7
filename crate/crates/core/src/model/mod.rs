//! Decoder-only transformer runtime in `f32`.
//!
//! Row-vector convention throughout (`y = x·W`), pre-norm residual blocks and
//! a gated SiLU MLP. Attention over the cache goes through a pluggable
//! [`CacheKernel`] so tests can swap in an oracle.

pub mod fixtures;
mod io;
mod policy;
mod spec;

pub use io::{tensor_layout, MODEL_MAGIC, MODEL_VERSION};
pub use policy::PolicyTable;
pub use spec::{ModelSpec, Positional};

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::embeddings::RopeConfig;
use crate::error::{Error, Result};
use crate::identify::{AttentionMap, AttentionMaps, TokenId};
use crate::kvcache::{alibi_offset, attention, attention_weights, HeadKvCache, DEFAULT_EVICT_CHUNK};
use crate::math::{apply_norm, Matrix, NormKind, NormParams, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: NormParams<f32>,
    /// `[hidden, hidden]`
    pub wq: Matrix<f32>,
    /// `[hidden, kv_dim]`
    pub wk: Matrix<f32>,
    /// `[hidden, kv_dim]`
    pub wv: Matrix<f32>,
    /// `[hidden, hidden]`
    pub wo: Matrix<f32>,
    pub ffn_norm: NormParams<f32>,
    /// `[hidden, ffn]`
    pub w_gate: Matrix<f32>,
    /// `[hidden, ffn]`
    pub w_up: Matrix<f32>,
    /// `[ffn, hidden]`
    pub w_down: Matrix<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    embed: Matrix<f32>,
    layers: Vec<LayerWeights>,
    final_norm: NormParams<f32>,
    lm_head: Matrix<f32>,
    rope: Option<RopeConfig>,
    slopes: Option<Vec<f64>>,
}

fn check_shape(name: &str, m: &Matrix<f32>, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows || m.cols() != cols {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: vec![rows, cols],
            found: vec![m.rows(), m.cols()],
        });
    }
    Ok(())
}

fn check_norm(name: &str, n: &NormParams<f32>, kind: NormKind, dim: usize) -> Result<()> {
    if n.dim() != dim {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: vec![dim],
            found: vec![n.dim()],
        });
    }
    if n.kind() != kind {
        return Err(Error::config(format!("{name}: norm kind {:?} but model uses {kind:?}", n.kind())));
    }
    Ok(())
}

#[inline]
fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

fn add_into(acc: &mut [f32], x: &[f32]) {
    acc.iter_mut().zip(x).for_each(|(a, &b)| *a += b);
}

/// Greedy choice; ties go to the lowest token id.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

struct Projected {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

impl Model {
    pub fn new(
        spec: ModelSpec,
        embed: Matrix<f32>,
        layers: Vec<LayerWeights>,
        final_norm: NormParams<f32>,
        lm_head: Matrix<f32>,
    ) -> Result<Self> {
        spec.validate()?;
        let (h, kv, f, v) = (spec.hidden_dim, spec.kv_dim(), spec.ffn_dim, spec.vocab_size);
        check_shape("tok_embed", &embed, v, h)?;
        if layers.len() != spec.num_layers {
            return Err(Error::DimensionMismatch {
                context: "model layers",
                expected: spec.num_layers,
                actual: layers.len(),
            });
        }
        for (l, w) in layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            check_norm(&p("attn_norm"), &w.attn_norm, spec.norm_kind, h)?;
            check_norm(&p("ffn_norm"), &w.ffn_norm, spec.norm_kind, h)?;
            check_shape(&p("wq"), &w.wq, h, h)?;
            check_shape(&p("wk"), &w.wk, h, kv)?;
            check_shape(&p("wv"), &w.wv, h, kv)?;
            check_shape(&p("wo"), &w.wo, h, h)?;
            check_shape(&p("w_gate"), &w.w_gate, h, f)?;
            check_shape(&p("w_up"), &w.w_up, h, f)?;
            check_shape(&p("w_down"), &w.w_down, f, h)?;
        }
        check_norm("final_norm", &final_norm, spec.norm_kind, h)?;
        check_shape("lm_head", &lm_head, h, v)?;
        let rope = spec.rope();
        let slopes = match &spec.positional {
            Positional::Alibi { slopes } => Some(slopes.clone()),
            Positional::Rope { .. } => None,
        };
        Ok(Self {
            spec,
            embed,
            layers,
            final_norm,
            lm_head,
            rope,
            slopes,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn embed(&self) -> &Matrix<f32> {
        &self.embed
    }

    pub fn final_norm(&self) -> &NormParams<f32> {
        &self.final_norm
    }

    pub fn lm_head(&self) -> &Matrix<f32> {
        &self.lm_head
    }

    /// Content hash of the serialized weights, used as `model_id` in head sets.
    pub fn fingerprint(&self) -> String {
        format!("rzmd-{:016x}", crate::rng::fnv1a(&self.to_bytes()))
    }

    fn scale(&self) -> f32 {
        self.spec.softmax_scale() as f32
    }

    fn slope(&self, head: usize) -> Option<f64> {
        self.slopes.as_ref().map(|s| s[head])
    }

    fn embed_token(&self, token: TokenId) -> Result<Vec<f32>> {
        let t = token as usize;
        if t >= self.spec.vocab_size {
            return Err(Error::config(format!(
                "token {token} outside vocabulary of {}",
                self.spec.vocab_size
            )));
        }
        Ok(self.embed.row(t).to_vec())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.spec.max_context {
            return Err(Error::ContextOverflow {
                len,
                max: self.spec.max_context,
            });
        }
        Ok(())
    }

    fn project(&self, w: &LayerWeights, x: &[f32], pos: usize) -> Result<Projected> {
        let xn = apply_norm(x, &w.attn_norm)?;
        let mut q = w.wq.vecmat(&xn);
        let mut k = w.wk.vecmat(&xn);
        let v = w.wv.vecmat(&xn);
        if let Some(rope) = &self.rope {
            let d = self.spec.head_dim;
            for chunk in q.chunks_exact_mut(d).chain(k.chunks_exact_mut(d)) {
                rope.rotate_in_place(chunk, pos as f64)?;
            }
        }
        Ok(Projected { q, k, v })
    }

    /// Output projection, residual add and the MLP block.
    fn finish_layer(&self, w: &LayerWeights, x: &mut [f32], heads: &[f32]) -> Result<()> {
        add_into(x, &w.wo.vecmat(heads));
        let xn = apply_norm(x, &w.ffn_norm)?;
        let mut gate = w.w_gate.vecmat(&xn);
        let up = w.w_up.vecmat(&xn);
        gate.iter_mut().zip(&up).for_each(|(g, &u)| *g = silu(*g) * u);
        add_into(x, &w.w_down.vecmat(&gate));
        Ok(())
    }

    fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(self.lm_head.vecmat(&apply_norm(x, &self.final_norm)?))
    }

    /// Full-attention logits of the last position, with no cache at all.
    pub fn reference_logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        Ok(self.forward(tokens, None, &CompensatedKernel, false)?.0)
    }

    /// Greedy continuation recomputed from scratch at every step.
    pub fn reference_generate(&self, prompt: &[TokenId], steps: usize) -> Result<Vec<TokenId>> {
        let mut seq = prompt.to_vec();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let next = argmax(&self.reference_logits(&seq)?);
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }

    /// Attention weights of every head on every row of `tokens`.
    #[cfg(feature = "attn-capture")]
    pub fn capture_attention(&self, tokens: &[TokenId]) -> Result<AttentionMaps<f32>> {
        let (_, maps) = self.forward(tokens, None, &CompensatedKernel, true)?;
        Ok(maps.expect("capture requested"))
    }

    /// Forward pass over a whole prompt. Rows before the last use exact causal
    /// attention; the last row attends through `caches` (after their end of
    /// prefill eviction) when given, so compression shows up in the logits.
    fn forward(
        &self,
        tokens: &[TokenId],
        mut caches: Option<&mut Vec<Vec<HeadKvCache<f32>>>>,
        kernel: &dyn CacheKernel,
        capture: bool,
    ) -> Result<(Vec<f32>, Option<AttentionMaps<f32>>)> {
        let n = tokens.len();
        if n == 0 {
            return Err(Error::Empty("prompt"));
        }
        self.check_len(n)?;
        let (d, heads) = (self.spec.head_dim, self.spec.num_heads);
        let scale = self.scale();
        let mut hs = tokens.iter().map(|&t| self.embed_token(t)).collect::<Result<Vec<_>>>()?;
        let mut maps: Option<AttentionMaps<f32>> = capture.then(Vec::new);

        for (l, w) in self.layers.iter().enumerate() {
            let proj = hs
                .par_iter()
                .enumerate()
                .map(|(i, x)| self.project(w, x, i))
                .collect::<Result<Vec<_>>>()?;

            if let Some(caches) = caches.as_deref_mut() {
                for (kv, cache) in caches[l].iter_mut().enumerate() {
                    for p in &proj {
                        cache.append(&p.k[kv * d..(kv + 1) * d], &p.v[kv * d..(kv + 1) * d])?;
                    }
                }
                caches[l].par_iter_mut().try_for_each(|c| c.evict().map(|_| ()))?;
            }
            let layer_caches = caches.as_deref().map(|c| &c[l]);

            let per_head = (0..heads)
                .into_par_iter()
                .map(|h| {
                    let kv = self.spec.kv_head_of(h);
                    let slope = self.slope(h);
                    let ks = kv * d..(kv + 1) * d;
                    let mut rows = Vec::with_capacity(n);
                    let mut map = capture.then(|| AttentionMap::new(n));
                    for m in 0..n {
                        let q = &proj[m].q[h * d..(h + 1) * d];
                        let offset = |j: usize| slope.map_or(0.0, |s| alibi_offset::<f32>(m, j, s));
                        if let Some(map) = map.as_mut() {
                            let w = attention_weights(q, (0..=m).map(|j| (&proj[j].k[ks.clone()], offset(j))), scale);
                            map.push_row(&w)?;
                        }
                        let out = match layer_caches {
                            Some(c) if m + 1 == n => kernel.attend(&c[kv], q, scale, slope)?,
                            _ => attention(
                                q,
                                (0..=m).map(|j| (&proj[j].k[ks.clone()], &proj[j].v[ks.clone()], offset(j))),
                                scale,
                            ),
                        };
                        rows.push(out);
                    }
                    Ok((rows, map))
                })
                .collect::<Result<Vec<_>>>()?;

            hs.par_iter_mut().enumerate().try_for_each(|(m, x)| {
                let mut cat = vec![0.0f32; self.spec.hidden_dim];
                for (h, (rows, _)) in per_head.iter().enumerate() {
                    cat[h * d..(h + 1) * d].copy_from_slice(&rows[m]);
                }
                self.finish_layer(w, x, &cat)
            })?;
            if let Some(maps) = maps.as_mut() {
                maps.push(per_head.into_iter().map(|(_, m)| m.expect("capture on")).collect());
            }
        }
        Ok((self.logits(&hs[n - 1])?, maps))
    }
}

/// Attention of one query over one head's cache.
pub trait CacheKernel: Send + Sync {
    fn attend(&self, cache: &HeadKvCache<f32>, q: &[f32], scale: f32, alibi_slope: Option<f64>) -> Result<Vec<f32>>;
}

/// The production kernel: the compensation token enters once, weighted by its
/// dropped count.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedKernel;

impl CacheKernel for CompensatedKernel {
    fn attend(&self, cache: &HeadKvCache<f32>, q: &[f32], scale: f32, alibi_slope: Option<f64>) -> Result<Vec<f32>> {
        cache.attend(q, scale, alibi_slope)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct KvMemory {
    pub layer: usize,
    pub kv_head: usize,
    pub tokens_seen: u64,
    /// Stored tokens plus one if a compensation token is live.
    pub stored_entries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryReport {
    pub heads: Vec<KvMemory>,
    /// Entries a full cache would hold.
    pub full_entries: u64,
    pub stored_entries: u64,
}

impl MemoryReport {
    pub fn from_caches<T: Real>(caches: &[Vec<HeadKvCache<T>>]) -> Self {
        let heads: Vec<KvMemory> = caches
            .iter()
            .enumerate()
            .flat_map(|(layer, row)| {
                row.iter().enumerate().map(move |(kv_head, c)| KvMemory {
                    layer,
                    kv_head,
                    tokens_seen: c.total_seen(),
                    stored_entries: c.stored_entries(),
                })
            })
            .collect();
        Self {
            full_entries: heads.iter().map(|h| h.tokens_seen).sum(),
            stored_entries: heads.iter().map(|h| h.stored_entries as u64).sum(),
            heads,
        }
    }

    /// Full over stored entries; 1 for an empty cache.
    pub fn ratio(&self) -> f64 {
        if self.stored_entries == 0 {
            1.0
        } else {
            self.full_entries as f64 / self.stored_entries as f64
        }
    }
}

/// Incremental generation state: one cache per (layer, KV head).
pub struct Session {
    model: Arc<Model>,
    policies: PolicyTable,
    caches: Vec<Vec<HeadKvCache<f32>>>,
    kernel: Arc<dyn CacheKernel>,
    evict_chunk: usize,
    position: usize,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("policies", &self.policies)
            .field("position", &self.position)
            .field("evict_chunk", &self.evict_chunk)
            .finish_non_exhaustive()
    }
}

impl Session {
    pub fn new(model: Arc<Model>, policies: PolicyTable) -> Result<Self> {
        let spec = model.spec();
        if policies.num_layers() != spec.num_layers || policies.num_heads() != spec.num_heads {
            return Err(Error::Geometry(format!(
                "policy table is {}x{}, model is {}x{}",
                policies.num_layers(),
                policies.num_heads(),
                spec.num_layers,
                spec.num_heads
            )));
        }
        let caches = (0..spec.num_layers)
            .map(|l| {
                (0..spec.num_kv_heads)
                    .map(|kv| HeadKvCache::new(spec.head_dim, *policies.kv_policy(l, kv)))
                    .collect()
            })
            .collect();
        Ok(Self {
            model,
            policies,
            caches,
            kernel: Arc::new(CompensatedKernel),
            evict_chunk: DEFAULT_EVICT_CHUNK,
            position: 0,
        })
    }

    pub fn with_kernel(mut self, kernel: Arc<dyn CacheKernel>) -> Self {
        self.kernel = kernel;
        self
    }

    /// Decode-time eviction runs once a recent buffer overshoots its target by
    /// more than `chunk` tokens. `chunk = 0` evicts on every step.
    pub fn with_evict_chunk(mut self, chunk: usize) -> Self {
        self.evict_chunk = chunk;
        self
    }

    pub fn model(&self) -> &Arc<Model> {
        &self.model
    }

    pub fn policies(&self) -> &PolicyTable {
        &self.policies
    }

    pub fn caches(&self) -> &[Vec<HeadKvCache<f32>>] {
        &self.caches
    }

    pub fn position(&self) -> usize {
        self.position
    }

    fn fresh(&self) -> Result<()> {
        if self.position != 0 {
            return Err(Error::config("prefill needs a fresh session"));
        }
        Ok(())
    }

    /// Processes the prompt and returns the logits of its last position.
    pub fn prefill(&mut self, tokens: &[TokenId]) -> Result<Vec<f32>> {
        self.fresh()?;
        let model = Arc::clone(&self.model);
        let (logits, _) = model.forward(tokens, Some(&mut self.caches), self.kernel.as_ref(), false)?;
        self.position = tokens.len();
        Ok(logits)
    }

    /// Prefill that also records every head's attention weights. Only
    /// meaningful with full caches, so other policies are rejected.
    #[cfg(feature = "attn-capture")]
    pub fn prefill_capture(&mut self, tokens: &[TokenId]) -> Result<(Vec<f32>, AttentionMaps<f32>)> {
        self.fresh()?;
        if !self.policies.is_all_retrieval() {
            return Err(Error::config("attention capture requires every head to keep its full cache"));
        }
        let model = Arc::clone(&self.model);
        let (logits, maps) = model.forward(tokens, Some(&mut self.caches), self.kernel.as_ref(), true)?;
        self.position = tokens.len();
        Ok((logits, maps.expect("capture requested")))
    }

    /// Feeds one token and returns the next-token logits.
    pub fn decode_step(&mut self, token: TokenId) -> Result<Vec<f32>> {
        let model = Arc::clone(&self.model);
        let spec = model.spec();
        model.check_len(self.position + 1)?;
        let d = spec.head_dim;
        let scale = model.scale();
        let mut x = model.embed_token(token)?;
        for (l, w) in model.layers.iter().enumerate() {
            let p = model.project(w, &x, self.position)?;
            let chunk = self.evict_chunk;
            self.caches[l].par_iter_mut().enumerate().try_for_each(|(kv, c)| {
                c.append(&p.k[kv * d..(kv + 1) * d], &p.v[kv * d..(kv + 1) * d])?;
                c.evict_lazy(chunk).map(|_| ())
            })?;
            let caches = &self.caches[l];
            let kernel = self.kernel.as_ref();
            let outs = (0..spec.num_heads)
                .into_par_iter()
                .map(|h| kernel.attend(&caches[spec.kv_head_of(h)], &p.q[h * d..(h + 1) * d], scale, model.slope(h)))
                .collect::<Result<Vec<_>>>()?;
            model.finish_layer(w, &mut x, &outs.concat())?;
        }
        self.position += 1;
        model.logits(&x)
    }

    /// Greedy continuation of `prompt` for `steps` tokens.
    pub fn generate(&mut self, prompt: &[TokenId], steps: usize) -> Result<Vec<TokenId>> {
        let mut logits = self.prefill(prompt)?;
        let mut out = Vec::with_capacity(steps);
        for i in 0..steps {
            let next = argmax(&logits);
            out.push(next);
            if i + 1 < steps {
                logits = self.decode_step(next)?;
            }
        }
        Ok(out)
    }

    pub fn memory_report(&self) -> MemoryReport {
        MemoryReport::from_caches(&self.caches)
    }
}
