//! Per-head KV caches with head-wise eviction.
//!
//! A head is either kept whole ([`HeadPolicy::Retrieval`]), compressed to
//! sinks + a recent buffer + one compensation token
//! ([`HeadPolicy::Compressed`]), or cut to sinks + a fixed window with the
//! rest discarded ([`HeadPolicy::Window`], the streaming baseline and the
//! ALiBi scope plan).

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::math::{dot, Real};

/// Extra slack the recent buffer may grow past its target length before a
/// lazy eviction runs during decode.
pub const DEFAULT_EVICT_CHUNK: usize = 128;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"RZKV";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Parameters of a compressed (non-retrieval) head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompressionParams {
    sinks: usize,
    ratio: f64,
    threshold: usize,
}

impl CompressionParams {
    pub fn new(sinks: usize, ratio: f64, threshold: usize) -> Result<Self> {
        if !(ratio > 1.0) {
            return Err(Error::config(format!("compression ratio must be > 1, got {ratio}")));
        }
        if threshold < sinks + 1 {
            return Err(Error::config(format!(
                "compression threshold {threshold} must be at least sinks + 1 = {}",
                sinks + 1
            )));
        }
        Ok(Self {
            sinks,
            ratio,
            threshold,
        })
    }

    /// A compressed head whose buffer always covers the whole sequence.
    pub fn never(sinks: usize) -> Self {
        Self {
            sinks,
            ratio: f64::INFINITY,
            threshold: usize::MAX,
        }
    }

    pub fn sinks(&self) -> usize {
        self.sinks
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadPolicy {
    /// Full cache.
    Retrieval,
    /// Sinks + recent `max(S_0, ceil(N / C))` tokens + compensation token.
    Compressed(CompressionParams),
    /// Sinks + the most recent `window` tokens; older tokens are discarded.
    Window { sinks: usize, window: usize },
}

impl HeadPolicy {
    pub fn sinks(&self) -> usize {
        match self {
            Self::Retrieval => 0,
            Self::Compressed(p) => p.sinks,
            Self::Window { sinks, .. } => *sinks,
        }
    }

    pub fn is_retrieval(&self) -> bool {
        matches!(self, Self::Retrieval)
    }

    /// Target length of the recent buffer after `total_seen` tokens, `None`
    /// when the head is never truncated.
    pub fn recent_target(&self, total_seen: u64) -> Option<u64> {
        match self {
            Self::Retrieval => None,
            Self::Compressed(p) => Some(buffer_length(total_seen, p)),
            Self::Window { window, .. } => Some(*window as u64),
        }
    }
}

/// `L_h = max(S_0, ceil(N / C))`.
pub fn buffer_length(total_seen: u64, params: &CompressionParams) -> u64 {
    let scaled = (total_seen as f64 / params.ratio).ceil();
    let scaled = if scaled >= u64::MAX as f64 { u64::MAX } else { scaled as u64 };
    scaled.max(params.threshold as u64)
}

/// Mean key/value of every dropped token together with how many were dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct CompensationToken<T> {
    key: Vec<T>,
    value: Vec<T>,
    dropped: u64,
}

impl<T: Real> CompensationToken<T> {
    pub fn empty(dim: usize) -> Self {
        Self {
            key: vec![T::zero(); dim],
            value: vec![T::zero(); dim],
            dropped: 0,
        }
    }

    pub fn key(&self) -> &[T] {
        &self.key
    }

    pub fn value(&self) -> &[T] {
        &self.value
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn dim(&self) -> usize {
        self.key.len()
    }

    pub fn is_inert(&self) -> bool {
        self.dropped == 0
    }

    /// Running-mean update with newly dropped `(key, value)` pairs.
    pub fn fold<'a, I>(&mut self, dropped: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a [T], &'a [T])>,
    {
        let dim = self.dim();
        let mut key_sum = vec![T::zero(); dim];
        let mut value_sum = vec![T::zero(); dim];
        let mut count = 0u64;
        for (k, v) in dropped {
            for (len, context) in [(k.len(), "compensation key"), (v.len(), "compensation value")] {
                if len != dim {
                    return Err(Error::DimensionMismatch {
                        context,
                        expected: dim,
                        actual: len,
                    });
                }
            }
            key_sum.iter_mut().zip(k).for_each(|(s, &x)| *s = *s + x);
            value_sum.iter_mut().zip(v).for_each(|(s, &x)| *s = *s + x);
            count += 1;
        }
        if count == 0 {
            return Ok(());
        }
        let old = T::of(self.dropped as f64);
        let total = T::of((self.dropped + count) as f64);
        for (mean, sum) in self.key.iter_mut().zip(&key_sum) {
            *mean = (*mean * old + *sum) / total;
        }
        for (mean, sum) in self.value.iter_mut().zip(&value_sum) {
            *mean = (*mean * old + *sum) / total;
        }
        self.dropped += count;
        Ok(())
    }
}

/// Functional form of [`CompensationToken::fold`].
pub fn fold_dropped<T: Real>(comp: &CompensationToken<T>, dropped: &[(Vec<T>, Vec<T>)]) -> Result<CompensationToken<T>> {
    let mut out = comp.clone();
    out.fold(dropped.iter().map(|(k, v)| (k.as_slice(), v.as_slice())))?;
    Ok(out)
}

/// Growable ring of fixed-width (key, value) rows; every row is contiguous.
#[derive(Debug, Clone)]
struct TokenRing<T> {
    dim: usize,
    keys: Vec<T>,
    values: Vec<T>,
    head: usize,
    len: usize,
}

impl<T: Real> TokenRing<T> {
    fn new(dim: usize) -> Self {
        Self {
            dim,
            keys: Vec::new(),
            values: Vec::new(),
            head: 0,
            len: 0,
        }
    }

    fn capacity(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.keys.len() / self.dim
        }
    }

    fn slot(&self, i: usize) -> usize {
        (self.head + i) % self.capacity()
    }

    fn key(&self, i: usize) -> &[T] {
        let s = self.slot(i) * self.dim;
        &self.keys[s..s + self.dim]
    }

    fn value(&self, i: usize) -> &[T] {
        let s = self.slot(i) * self.dim;
        &self.values[s..s + self.dim]
    }

    fn grow(&mut self) {
        let cap = self.capacity();
        let new_cap = (cap * 2).max(16);
        let mut keys = Vec::with_capacity(new_cap * self.dim);
        let mut values = Vec::with_capacity(new_cap * self.dim);
        for i in 0..self.len {
            keys.extend_from_slice(self.key(i));
            values.extend_from_slice(self.value(i));
        }
        keys.resize(new_cap * self.dim, T::zero());
        values.resize(new_cap * self.dim, T::zero());
        self.keys = keys;
        self.values = values;
        self.head = 0;
    }

    fn push(&mut self, key: &[T], value: &[T]) {
        if self.len == self.capacity() {
            self.grow();
        }
        let s = self.slot(self.len) * self.dim;
        self.keys[s..s + self.dim].copy_from_slice(key);
        self.values[s..s + self.dim].copy_from_slice(value);
        self.len += 1;
    }

    fn pop_front(&mut self, n: usize) {
        debug_assert!(n <= self.len);
        if n == 0 {
            return;
        }
        self.head = self.slot(n);
        self.len -= n;
    }

    fn iter(&self) -> impl Iterator<Item = (&[T], &[T])> + '_ {
        (0..self.len).map(move |i| (self.key(i), self.value(i)))
    }
}

/// One attention head's KV cache.
#[derive(Debug, Clone)]
pub struct HeadKvCache<T> {
    dim: usize,
    policy: HeadPolicy,
    sink_keys: Vec<T>,
    sink_values: Vec<T>,
    recent: TokenRing<T>,
    comp: CompensationToken<T>,
    discarded: u64,
    total_seen: u64,
}

impl<T: Real> HeadKvCache<T> {
    pub fn new(dim: usize, policy: HeadPolicy) -> Self {
        Self {
            dim,
            policy,
            sink_keys: Vec::new(),
            sink_values: Vec::new(),
            recent: TokenRing::new(dim),
            comp: CompensationToken::empty(dim),
            discarded: 0,
            total_seen: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn policy(&self) -> &HeadPolicy {
        &self.policy
    }

    pub fn total_seen(&self) -> u64 {
        self.total_seen
    }

    pub fn sink_count(&self) -> usize {
        self.sink_keys.len() / self.dim.max(1)
    }

    pub fn recent_len(&self) -> usize {
        self.recent.len
    }

    /// Tokens held verbatim (sinks + recent).
    pub fn stored_tokens(&self) -> usize {
        self.sink_count() + self.recent_len()
    }

    /// KV entries occupying memory; a live compensation token counts as one.
    pub fn stored_entries(&self) -> usize {
        self.stored_tokens() + usize::from(!self.comp.is_inert())
    }

    /// Tokens dropped without a compensation token (window policy).
    pub fn discarded(&self) -> u64 {
        self.discarded
    }

    pub fn compensation(&self) -> &CompensationToken<T> {
        &self.comp
    }

    pub fn append(&mut self, key: &[T], value: &[T]) -> Result<()> {
        for (len, context) in [(key.len(), "cache key"), (value.len(), "cache value")] {
            if len != self.dim {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: self.dim,
                    actual: len,
                });
            }
        }
        if self.sink_count() < self.policy.sinks() && self.recent.len == 0 && self.dropped_total() == 0 {
            self.sink_keys.extend_from_slice(key);
            self.sink_values.extend_from_slice(value);
        } else {
            self.recent.push(key, value);
        }
        self.total_seen += 1;
        Ok(())
    }

    fn dropped_total(&self) -> u64 {
        self.comp.dropped + self.discarded
    }

    /// Truncate the recent buffer to the policy's target length. Compressed
    /// heads fold the removed tokens into the compensation token. Returns the
    /// number of tokens removed.
    pub fn evict(&mut self) -> Result<usize> {
        let Some(target) = self.policy.recent_target(self.total_seen) else {
            return Ok(0);
        };
        let len = self.recent.len as u64;
        if len <= target {
            return Ok(0);
        }
        let excess = (len - target) as usize;
        match self.policy {
            HeadPolicy::Compressed(_) => {
                let recent = &self.recent;
                self.comp.fold((0..excess).map(|i| (recent.key(i), recent.value(i))))?;
            }
            HeadPolicy::Window { .. } => self.discarded += excess as u64,
            HeadPolicy::Retrieval => unreachable!("retrieval heads have no target"),
        }
        self.recent.pop_front(excess);
        Ok(excess)
    }

    /// Evict only once the recent buffer overshoots its target by more than
    /// `chunk` tokens.
    pub fn evict_lazy(&mut self, chunk: usize) -> Result<usize> {
        match self.policy.recent_target(self.total_seen) {
            Some(target) if self.recent.len as u64 > target.saturating_add(chunk as u64) => self.evict(),
            _ => Ok(0),
        }
    }

    /// Stored tokens in sequence order with their absolute positions.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &[T], &[T])> + '_ {
        let sinks = self.sink_count();
        let first_recent = (self.total_seen as usize) - self.recent.len;
        let sink_iter = (0..sinks).map(move |i| {
            let s = i * self.dim;
            (i, &self.sink_keys[s..s + self.dim], &self.sink_values[s..s + self.dim])
        });
        let recent_iter = self
            .recent
            .iter()
            .enumerate()
            .map(move |(j, (k, v))| (first_recent + j, k, v));
        sink_iter.chain(recent_iter)
    }

    /// Attention of `q` (the query of the most recently appended token) over
    /// this cache. `alibi_slope` adds the linear distance bias.
    pub fn attend(&self, q: &[T], scale: T, alibi_slope: Option<f64>) -> Result<Vec<T>> {
        if q.len() != self.dim {
            return Err(Error::DimensionMismatch {
                context: "attention query",
                expected: self.dim,
                actual: q.len(),
            });
        }
        if self.stored_tokens() == 0 && self.comp.is_inert() {
            return Err(Error::Empty("attention over an empty cache"));
        }
        if alibi_slope.is_some() && !self.comp.is_inert() {
            return Err(Error::config("compensation tokens are not defined for ALiBi heads"));
        }
        let query_pos = self.total_seen.saturating_sub(1) as usize;
        let comp = (!self.comp.is_inert()).then(|| {
            (
                self.comp.key.as_slice(),
                self.comp.value.as_slice(),
                T::of((self.comp.dropped as f64).ln()),
            )
        });
        let kept = self.entries().map(|(pos, k, v)| {
            let offset = alibi_slope.map_or(T::zero(), |s| alibi_offset(query_pos, pos, s));
            (k, v, offset)
        });
        Ok(attention(q, comp.into_iter().chain(kept), scale))
    }
}

/// ALiBi score offset `-slope·(m - n)` in the kernel's element type.
#[inline]
pub(crate) fn alibi_offset<T: Real>(query: usize, key: usize, slope: f64) -> T {
    T::of(-slope * (query - key) as f64)
}

/// Softmax attention of one query over `(key, value, offset)` entries where
/// each score is `scale·q·k + offset`. A compensation token enters with
/// `offset = ln(N_d)`, so it counts as `N_d` identical copies of itself.
pub fn attention<'a, T, I>(q: &[T], entries: I, scale: T) -> Vec<T>
where
    T: Real,
    I: IntoIterator<Item = (&'a [T], &'a [T], T)>,
{
    let entries: Vec<(&[T], &[T], T)> = entries.into_iter().collect();
    let dim_v = entries.first().map_or(0, |e| e.1.len());
    let scores: Vec<T> = entries.iter().map(|(k, _, off)| scale * dot(q, k) + *off).collect();
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out = vec![T::zero(); dim_v];
    let mut total = T::zero();
    for ((_, v, _), &s) in entries.iter().zip(&scores) {
        let w = (s - max).exp();
        total = total + w;
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o = *o + w * x;
        }
    }
    out.iter_mut().for_each(|o| *o = *o / total);
    out
}

/// The softmax weights [`attention`] would use for the same entries.
pub fn attention_weights<'a, T, I>(q: &[T], entries: I, scale: T) -> Vec<T>
where
    T: Real,
    I: IntoIterator<Item = (&'a [T], T)>,
{
    let scores: Vec<T> = entries.into_iter().map(|(k, off)| scale * dot(q, k) + off).collect();
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exp: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total = exp.iter().copied().fold(T::zero(), |a, b| a + b);
    exp.into_iter().map(|e| e / total).collect()
}

/// Compressed attention over sinks, recent tokens and the compensation token.
pub fn compressed_attention<T: Real>(q: &[T], cache: &HeadKvCache<T>, scale: T) -> Result<Vec<T>> {
    cache.attend(q, scale, None)
}

/// Functional form of [`HeadKvCache::evict`].
pub fn evict<T: Real>(cache: &HeadKvCache<T>) -> Result<HeadKvCache<T>> {
    let mut out = cache.clone();
    out.evict()?;
    Ok(out)
}

fn write_f32s<W: Write, T: Real>(w: &mut W, xs: &[T]) -> io::Result<()> {
    for x in xs {
        w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Truncated(what.to_string()),
        _ => Error::Io(e),
    })
}

fn read_f32s<R: Read, T: Real>(r: &mut R, n: usize, what: &str) -> Result<Vec<T>> {
    let mut buf = vec![0u8; n * 4];
    read_exact_or(r, &mut buf, what)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| T::of(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
        .collect())
}

impl<T: Real> HeadKvCache<T> {
    /// Binary debug snapshot: `"RZKV"`, version, dim, sink count, recent
    /// count, dropped count, then sink keys, sink values, recent keys,
    /// recent values, compensation key and value as little-endian `f32`.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<()> {
        if self.discarded > 0 {
            return Err(Error::config("snapshots cannot represent discarded window tokens"));
        }
        w.write_all(&SNAPSHOT_MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.sink_count() as u32).to_le_bytes())?;
        w.write_all(&(self.recent.len as u64).to_le_bytes())?;
        w.write_all(&self.comp.dropped.to_le_bytes())?;
        write_f32s(w, &self.sink_keys)?;
        write_f32s(w, &self.sink_values)?;
        for (k, _) in self.recent.iter() {
            write_f32s(w, k)?;
        }
        for (_, v) in self.recent.iter() {
            write_f32s(w, v)?;
        }
        write_f32s(w, &self.comp.key)?;
        write_f32s(w, &self.comp.value)?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R, policy: HeadPolicy) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact_or(r, &mut magic, "snapshot magic")?;
        if magic != SNAPSHOT_MAGIC {
            return Err(Error::BadMagic {
                expected: SNAPSHOT_MAGIC,
                found: magic,
            });
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        read_exact_or(r, &mut b4, "snapshot version")?;
        let version = u32::from_le_bytes(b4);
        if version != SNAPSHOT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        read_exact_or(r, &mut b4, "snapshot header")?;
        let dim = u32::from_le_bytes(b4) as usize;
        read_exact_or(r, &mut b4, "snapshot header")?;
        let sinks = u32::from_le_bytes(b4) as usize;
        read_exact_or(r, &mut b8, "snapshot header")?;
        let kept = u64::from_le_bytes(b8) as usize;
        read_exact_or(r, &mut b8, "snapshot header")?;
        let dropped = u64::from_le_bytes(b8);
        if sinks > policy.sinks() {
            return Err(Error::Geometry(format!(
                "snapshot holds {sinks} sinks but the policy allows {}",
                policy.sinks()
            )));
        }
        let mut cache = Self::new(dim, policy);
        cache.sink_keys = read_f32s(r, sinks * dim, "sink keys")?;
        cache.sink_values = read_f32s(r, sinks * dim, "sink values")?;
        let keys: Vec<T> = read_f32s(r, kept * dim, "recent keys")?;
        let values: Vec<T> = read_f32s(r, kept * dim, "recent values")?;
        for i in 0..kept {
            cache.recent.push(&keys[i * dim..(i + 1) * dim], &values[i * dim..(i + 1) * dim]);
        }
        cache.comp.key = read_f32s(r, dim, "compensation key")?;
        cache.comp.value = read_f32s(r, dim, "compensation value")?;
        cache.comp.dropped = dropped;
        cache.total_seen = (sinks + kept) as u64 + dropped;
        Ok(cache)
    }
}
