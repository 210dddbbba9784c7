//! Retrieval-head identification.
//!
//! A block of random tokens repeated several times is fed through the model
//! with attention capture on. An *echo* head attends to earlier copies of the
//! current token; an *induction* head attends to the token that followed an
//! earlier copy. The top heads by each score keep their full cache.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Real;
use crate::rng::SeedStream;

pub type TokenId = u32;

pub const DEFAULT_PROBE_TOKENS: usize = 2500;
pub const DEFAULT_PROBE_REPEATS: usize = 4;
pub const DEFAULT_INDUCTION_FRAC: f64 = 0.14;
pub const DEFAULT_ECHO_FRAC: f64 = 0.01;
pub const HEAD_SET_VERSION: u32 = 1;

/// Maximum deviation of a captured attention row from unit sum.
const ROW_SUM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSpec {
    pub unique_tokens: usize,
    pub repeats: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ProbeSpec {
    pub fn new(unique_tokens: usize, repeats: usize, vocab_size: usize, seed: u64) -> Result<Self> {
        let spec = Self {
            unique_tokens,
            repeats,
            vocab_size,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.unique_tokens < 2 {
            return Err(Error::config("probe needs at least 2 unique tokens"));
        }
        if self.repeats < 2 {
            return Err(Error::config("probe needs at least 2 repeats"));
        }
        if self.vocab_size == 0 {
            return Err(Error::config("probe vocabulary is empty"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.unique_tokens * self.repeats
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `K` uniform draws from the vocabulary, repeated `repeats` times.
pub fn build_probe(spec: &ProbeSpec) -> Result<Vec<TokenId>> {
    spec.validate()?;
    let mut rng = SeedStream::new(spec.seed).stream("probe");
    let block: Vec<TokenId> = (0..spec.unique_tokens)
        .map(|_| rng.random_range(0..spec.vocab_size as TokenId))
        .collect();
    Ok(block.iter().copied().cycle().take(spec.len()).collect())
}

/// Causal attention weights of one head, stored as a packed lower triangle:
/// row `m` holds the weights on keys `0..=m`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    len: usize,
    data: Vec<T>,
}

impl<T: Real> AttentionMap<T> {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            data: Vec::with_capacity(len * (len + 1) / 2),
        }
    }

    pub fn from_fn(len: usize, mut weight: impl FnMut(usize, usize) -> T) -> Self {
        let mut map = Self::new(len);
        for m in 0..len {
            map.data.extend((0..=m).map(|n| weight(m, n)));
        }
        map
    }

    /// Append the next row; it must hold exactly `rows_filled + 1` weights.
    pub fn push_row(&mut self, row: &[T]) -> Result<()> {
        let m = self.rows_filled();
        if m >= self.len || row.len() != m + 1 {
            return Err(Error::DimensionMismatch {
                context: "attention map row",
                expected: m + 1,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn rows_filled(&self) -> usize {
        // inverse of m(m+1)/2
        let mut m = ((2.0 * self.data.len() as f64).sqrt()) as usize;
        while m * (m + 1) / 2 > self.data.len() {
            m -= 1;
        }
        while (m + 1) * (m + 2) / 2 <= self.data.len() {
            m += 1;
        }
        m
    }

    pub fn is_complete(&self) -> bool {
        self.data.len() == self.len * (self.len + 1) / 2
    }

    pub fn row(&self, m: usize) -> &[T] {
        let start = m * (m + 1) / 2;
        &self.data[start..start + m + 1]
    }
}

/// Captured attention of every head in a model, indexed `[layer][head]`.
pub type AttentionMaps<T> = Vec<Vec<AttentionMap<T>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadScore {
    pub id: HeadId,
    pub echo: f64,
    pub induction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub num_layers: usize,
    pub heads_per_layer: usize,
    /// Row-major by (layer, head).
    pub scores: Vec<HeadScore>,
}

impl ProbeReport {
    pub fn score(&self, id: HeadId) -> Option<&HeadScore> {
        self.scores.get(id.layer * self.heads_per_layer + id.head)
    }

    pub fn num_heads(&self) -> usize {
        self.scores.len()
    }

    /// Heads ordered by descending score; ties go to the lower (layer, head).
    pub fn ranking(&self, key: impl Fn(&HeadScore) -> f64) -> Vec<HeadId> {
        let mut order: Vec<&HeadScore> = self.scores.iter().collect();
        order.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.id.cmp(&b.id)));
        order.into_iter().map(|s| s.id).collect()
    }
}

/// Runs the probe through `model` with attention capture and scores every
/// head.
#[cfg(feature = "attn-capture")]
pub fn probe_model(model: &crate::model::Model, probe: &ProbeSpec) -> Result<ProbeReport> {
    let spec = model.spec();
    if probe.vocab_size > spec.vocab_size {
        return Err(Error::config(format!(
            "probe vocabulary {} exceeds the model's {}",
            probe.vocab_size, spec.vocab_size
        )));
    }
    if probe.len() > spec.max_context {
        return Err(Error::config(format!(
            "probe of {} tokens exceeds the context limit {}; use at most {} unique tokens",
            probe.len(),
            spec.max_context,
            spec.max_context / probe.repeats
        )));
    }
    let tokens = build_probe(probe)?;
    let maps = model.capture_attention(&tokens)?;
    score_heads(&maps, &tokens, probe.unique_tokens)
}

/// Echo and induction target positions for every scored query position.
struct Targets {
    /// (query position, echo targets, induction targets)
    rows: Vec<(usize, Vec<usize>, Vec<usize>)>,
}

impl Targets {
    fn new(tokens: &[TokenId], unique_tokens: usize) -> Self {
        let mut seen: HashMap<TokenId, Vec<usize>> = HashMap::new();
        let mut rows = Vec::new();
        for (m, &tok) in tokens.iter().enumerate() {
            if m >= unique_tokens {
                let earlier = seen.get(&tok).map(Vec::as_slice).unwrap_or(&[]);
                let echo = earlier.to_vec();
                // n = p + 1 where token(p) = token(m), 1 <= n < m
                let induction: Vec<usize> = earlier.iter().map(|p| p + 1).filter(|&n| n < m).collect();
                rows.push((m, echo, induction));
            }
            seen.entry(tok).or_default().push(m);
        }
        Self { rows }
    }
}

fn score_map<T: Real>(map: &AttentionMap<T>, targets: &Targets) -> (f64, f64) {
    let (mut echo_sum, mut echo_n) = (0.0, 0usize);
    let (mut ind_sum, mut ind_n) = (0.0, 0usize);
    for (m, echo, induction) in &targets.rows {
        let row = map.row(*m);
        if !echo.is_empty() {
            echo_sum += echo.iter().map(|&n| row[n].as_f64()).sum::<f64>();
            echo_n += 1;
        }
        if !induction.is_empty() {
            ind_sum += induction.iter().map(|&n| row[n].as_f64()).sum::<f64>();
            ind_n += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { (s / n as f64).clamp(0.0, 1.0) };
    (mean(echo_sum, echo_n), mean(ind_sum, ind_n))
}

/// Per-head echo and induction scores over the repeated blocks of a probe.
///
/// `unique_tokens` is the block length `K`; only query positions `m >= K`
/// are scored and positions without any target are skipped.
pub fn score_heads<T: Real>(maps: &AttentionMaps<T>, tokens: &[TokenId], unique_tokens: usize) -> Result<ProbeReport> {
    let num_layers = maps.len();
    let heads_per_layer = maps.first().map_or(0, Vec::len);
    for (layer, heads) in maps.iter().enumerate() {
        if heads.len() != heads_per_layer {
            return Err(Error::Geometry(format!(
                "layer {layer} has {} attention maps, expected {heads_per_layer}",
                heads.len()
            )));
        }
        for map in heads {
            if map.len() != tokens.len() || !map.is_complete() {
                return Err(Error::DimensionMismatch {
                    context: "attention map length",
                    expected: tokens.len(),
                    actual: map.len(),
                });
            }
            for m in 0..map.len() {
                let sum: f64 = map.row(m).iter().map(|w| w.as_f64()).sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(Error::NotStochastic { row: m, sum });
                }
            }
        }
    }
    let targets = Targets::new(tokens, unique_tokens);
    let scores = maps
        .iter()
        .enumerate()
        .flat_map(|(layer, heads)| {
            let targets = &targets;
            heads.iter().enumerate().map(move |(head, map)| {
                let (echo, induction) = score_map(map, targets);
                HeadScore {
                    id: HeadId::new(layer, head),
                    echo,
                    induction,
                }
            })
        })
        .collect();
    Ok(ProbeReport {
        num_layers,
        heads_per_layer,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Echo,
    Induction,
    Both,
    /// Added because another head sharing its KV group was selected.
    Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedHead {
    pub layer: usize,
    pub head: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub echo_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub induction_score: Option<f64>,
    pub provenance: Provenance,
}

impl SelectedHead {
    pub fn id(&self) -> HeadId {
        HeadId::new(self.layer, self.head)
    }
}

/// Heads that keep a full KV cache, as persisted between identification and
/// inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHeadSet {
    pub version: u32,
    pub model_id: String,
    pub induction_frac: f64,
    pub echo_frac: f64,
    pub num_layers: usize,
    pub heads_per_layer: usize,
    #[serde(default)]
    pub heads: Vec<SelectedHead>,
}

impl RetrievalHeadSet {
    pub fn ids(&self) -> BTreeSet<HeadId> {
        self.heads.iter().map(SelectedHead::id).collect()
    }

    pub fn contains(&self, id: HeadId) -> bool {
        self.heads.iter().any(|h| h.id() == id)
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn total_heads(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }

    /// Fraction of all heads that are protected.
    pub fn protected_fraction(&self) -> f64 {
        self.len() as f64 / self.total_heads().max(1) as f64
    }

    /// Every head in the given geometry.
    pub fn all(model_id: &str, num_layers: usize, heads_per_layer: usize) -> Self {
        let heads = (0..num_layers)
            .flat_map(|layer| (0..heads_per_layer).map(move |head| (layer, head)))
            .map(|(layer, head)| SelectedHead {
                layer,
                head,
                echo_score: None,
                induction_score: None,
                provenance: Provenance::Both,
            })
            .collect();
        Self {
            version: HEAD_SET_VERSION,
            model_id: model_id.to_string(),
            induction_frac: 1.0,
            echo_frac: 1.0,
            num_layers,
            heads_per_layer,
            heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != HEAD_SET_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        let mut seen = BTreeSet::new();
        for h in &self.heads {
            if h.layer >= self.num_layers || h.head >= self.heads_per_layer {
                return Err(Error::Geometry(format!(
                    "head {} outside a {}x{} model",
                    h.id(),
                    self.num_layers,
                    self.heads_per_layer
                )));
            }
            if !seen.insert(h.id()) {
                return Err(Error::Geometry(format!("head {} listed twice", h.id())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let set: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

/// `ceil(frac · total)`, ignoring float noise just above an integer.
fn top_count(frac: f64, total: usize) -> usize {
    let raw = frac * total as f64;
    let rounded = raw.round();
    let n = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (n as usize).min(total)
}

/// Union of the top `induction_frac` heads by induction score and the top
/// `echo_frac` heads by echo score, ranked globally across layers.
pub fn select_retrieval_heads(
    report: &ProbeReport,
    model_id: &str,
    induction_frac: f64,
    echo_frac: f64,
) -> Result<RetrievalHeadSet> {
    for (name, frac) in [("induction", induction_frac), ("echo", echo_frac)] {
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::config(format!("{name} fraction must lie in [0, 1], got {frac}")));
        }
    }
    let total = report.num_heads();
    let induction: BTreeSet<HeadId> = report
        .ranking(|s| s.induction)
        .into_iter()
        .take(top_count(induction_frac, total))
        .collect();
    let echo: BTreeSet<HeadId> = report
        .ranking(|s| s.echo)
        .into_iter()
        .take(top_count(echo_frac, total))
        .collect();
    let mut picked: BTreeMap<HeadId, Provenance> = BTreeMap::new();
    for &id in &induction {
        picked.insert(id, Provenance::Induction);
    }
    for &id in &echo {
        picked
            .entry(id)
            .and_modify(|p| *p = Provenance::Both)
            .or_insert(Provenance::Echo);
    }
    if picked.is_empty() && total > 0 {
        log::warn!("retrieval head set is empty; every head will be compressed");
    }
    let heads = picked
        .into_iter()
        .map(|(id, provenance)| {
            let score = report.score(id);
            SelectedHead {
                layer: id.layer,
                head: id.head,
                echo_score: score.map(|s| s.echo),
                induction_score: score.map(|s| s.induction),
                provenance,
            }
        })
        .collect();
    Ok(RetrievalHeadSet {
        version: HEAD_SET_VERSION,
        model_id: model_id.to_string(),
        induction_frac,
        echo_frac,
        num_layers: report.num_layers,
        heads_per_layer: report.heads_per_layer,
        heads,
    })
}

/// Widen the set so every KV group (`group_size` consecutive query heads)
/// with at least one selected head is selected in full.
pub fn gqa_promote(set: &RetrievalHeadSet, group_size: usize) -> Result<RetrievalHeadSet> {
    if group_size == 0 || set.heads_per_layer % group_size != 0 {
        return Err(Error::config(format!(
            "group size {group_size} does not divide {} heads per layer",
            set.heads_per_layer
        )));
    }
    let mut by_id: BTreeMap<HeadId, SelectedHead> = set.heads.iter().map(|h| (h.id(), h.clone())).collect();
    let groups: BTreeSet<(usize, usize)> = set.heads.iter().map(|h| (h.layer, h.head / group_size)).collect();
    for (layer, group) in groups {
        for head in group * group_size..(group + 1) * group_size {
            by_id.entry(HeadId::new(layer, head)).or_insert(SelectedHead {
                layer,
                head,
                echo_score: None,
                induction_score: None,
                provenance: Provenance::Group,
            });
        }
    }
    Ok(RetrievalHeadSet {
        heads: by_id.into_values().collect(),
        ..set.clone()
    })
}
