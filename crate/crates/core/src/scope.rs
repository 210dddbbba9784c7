//! Vision scope of ALiBi heads.
//!
//! With post-norm states bounded by `‖γ‖² + ‖b‖²`, a head's raw score
//! `x_m·B·x_nᵀ` (with `B = Wq·Wkᵀ`) moves by at most `2‖B‖₂(‖γ‖² + ‖b‖²)`
//! between any two keys, while the ALiBi bias falls by `slope` per token.
//! Past `L_h = (2‖B‖₂(‖γ‖² + ‖b‖²) − ln ε) / slope` every weight is at most
//! `ε`, so those keys can be dropped outright.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kvcache::HeadPolicy;
use crate::math::{apply_norm, dot, norm2, power_iteration, Matrix, NormParams};
use crate::model::{Model, PolicyTable, Positional};
use crate::rng::SeedStream;

pub const DEFAULT_SCOPE_EPSILON: f64 = 1e-3;

const SPECTRAL_TOL: f64 = 1e-10;
const SPECTRAL_ITERS: usize = 200_000;

/// One ALiBi head: its projections, the norm feeding them and its slope.
#[derive(Debug, Clone)]
pub struct ScopeInput {
    /// `[hidden, head_dim]`
    pub wq: Matrix<f64>,
    /// `[hidden, head_dim]`
    pub wk: Matrix<f64>,
    pub norm: NormParams<f64>,
    pub slope: f64,
    pub epsilon: f64,
}

impl ScopeInput {
    pub fn new(wq: Matrix<f64>, wk: Matrix<f64>, norm: NormParams<f64>, slope: f64, epsilon: f64) -> Result<Self> {
        let input = Self {
            wq,
            wk,
            norm,
            slope,
            epsilon,
        };
        input.validate()?;
        Ok(input)
    }

    pub fn validate(&self) -> Result<()> {
        if self.wq.rows() != self.wk.rows() || self.wq.cols() != self.wk.cols() {
            return Err(Error::Geometry(format!(
                "wq is {}x{} but wk is {}x{}",
                self.wq.rows(),
                self.wq.cols(),
                self.wk.rows(),
                self.wk.cols()
            )));
        }
        if self.norm.dim() != self.wq.rows() {
            return Err(Error::DimensionMismatch {
                context: "scope norm",
                expected: self.wq.rows(),
                actual: self.norm.dim(),
            });
        }
        if !(self.slope > 0.0 && self.slope.is_finite()) {
            return Err(Error::config(format!("slope must be > 0, got {}", self.slope)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }

    /// `B = Wq·Wkᵀ`, so that `q·k = x_m·B·x_nᵀ` for row states.
    pub fn bilinear(&self) -> Matrix<f64> {
        self.wq.matmul(&self.wk.transpose()).expect("shapes checked in validate")
    }

    /// `‖γ‖² + ‖b‖²`
    pub fn norm_bound(&self) -> f64 {
        let g = norm2(self.norm.gamma());
        let b = norm2(self.norm.bias());
        g * g + b * b
    }
}

fn spectral(b: &Matrix<f64>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if b.data().iter().all(|&x| x == 0.0) {
        return Ok((0.0, vec![0.0; b.cols()], vec![0.0; b.rows()]));
    }
    let e = power_iteration(b, SPECTRAL_TOL, SPECTRAL_ITERS)?;
    Ok((e.sigma, e.left, e.right))
}

/// Real-valued scope `L_h` in tokens.
pub fn vision_scope(input: &ScopeInput) -> Result<f64> {
    input.validate()?;
    let (sigma, _, _) = spectral(&input.bilinear())?;
    Ok(scope_from(sigma, input))
}

fn scope_from(sigma: f64, input: &ScopeInput) -> f64 {
    (2.0 * sigma * input.norm_bound() - input.epsilon.ln()) / input.slope
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub scope: f64,
    pub seq_len: usize,
    pub sequences: usize,
    /// Weights at a distance beyond the scope.
    pub weights_checked: u64,
    pub violations: u64,
    /// Largest `weight − ε` beyond the scope; negative when the bound holds.
    pub max_margin: f64,
    /// Largest weight at the first integer distance past the scope.
    pub max_boundary_weight: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Exact ALiBi attention (unscaled scores) over random and adversarial
/// hidden sequences, counting weights above `ε` beyond the scope.
///
/// Five adversarial sequences are built from the top singular pair `(u, v)`
/// of `B`: queries along `u` and keys along `v` maximize `q·k`.
pub fn verify_bound(input: &ScopeInput, seq_len: usize, trials: usize, seed: u64) -> Result<BoundReport> {
    input.validate()?;
    if trials == 0 {
        return Err(Error::config("verify_bound needs at least one trial"));
    }
    let (sigma, u, v) = spectral(&input.bilinear())?;
    let scope = scope_from(sigma, input);
    if (seq_len as f64) <= scope {
        return Err(Error::config(format!(
            "sequence length {seq_len} does not exceed the scope {scope:.2}"
        )));
    }
    let hidden = input.wq.rows();
    // pre-norm state whose normalized image points along `dir`
    let undo_gain = |dir: &[f64], sign: f64| -> Vec<f64> {
        dir.iter()
            .zip(input.norm.gamma())
            .map(|(&d, &g)| if g != 0.0 { sign * d / g } else { 0.0 })
            .collect()
    };
    let mut sequences: Vec<Vec<Vec<f64>>> = Vec::with_capacity(trials + 5);
    if sigma > 0.0 {
        let (qu, kv, nu, nv) = (undo_gain(&u, 1.0), undo_gain(&v, 1.0), undo_gain(&u, -1.0), undo_gain(&v, -1.0));
        sequences.push((0..seq_len).map(|i| if i + 1 == seq_len { qu.clone() } else { kv.clone() }).collect());
        sequences.push((0..seq_len).map(|i| if i % 2 == 0 { qu.clone() } else { kv.clone() }).collect());
        sequences.push((0..seq_len).map(|i| if i % 2 == 0 { nu.clone() } else { nv.clone() }).collect());
        sequences.push((0..seq_len).map(|i| if i % 3 == 0 { qu.clone() } else { nv.clone() }).collect());
        // worst case for the last row: keys beyond the horizon maximize q·k,
        // nearer keys minimize it
        let far_end = seq_len - 1 - (scope.floor() as usize + 1);
        sequences.push(
            (0..seq_len)
                .map(|i| match i {
                    _ if i + 1 == seq_len => qu.clone(),
                    _ if i <= far_end => kv.clone(),
                    _ => nv.clone(),
                })
                .collect(),
        );
    }
    let mut rng = SeedStream::new(seed).stream("scope-states");
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for t in 0..trials {
        let seq = (0..seq_len)
            .map(|_| {
                let scale = 10f64.powf(rng.random_range(-1.0..1.0));
                let mut x: Vec<f64> = (0..hidden).map(|_| unit.sample(&mut rng) * scale).collect();
                // every other trial spikes one coordinate, which pushes the
                // normalized state toward a single gain entry
                if t % 2 == 1 {
                    let i = rng.random_range(0..hidden);
                    x[i] += 10.0 * scale * hidden as f64;
                }
                x
            })
            .collect();
        sequences.push(seq);
    }

    let horizon = scope.floor() as usize + 1;
    let partial = sequences
        .par_iter()
        .map(|seq| check_sequence(input, seq, horizon))
        .collect::<Result<Vec<_>>>()?;
    let mut report = BoundReport {
        scope,
        seq_len,
        sequences: sequences.len(),
        weights_checked: 0,
        violations: 0,
        max_margin: f64::NEG_INFINITY,
        max_boundary_weight: 0.0,
    };
    for (checked, violations, margin, boundary) in partial {
        report.weights_checked += checked;
        report.violations += violations;
        report.max_margin = report.max_margin.max(margin);
        report.max_boundary_weight = report.max_boundary_weight.max(boundary);
    }
    Ok(report)
}

fn check_sequence(input: &ScopeInput, seq: &[Vec<f64>], horizon: usize) -> Result<(u64, u64, f64, f64)> {
    let mut qs = Vec::with_capacity(seq.len());
    let mut ks = Vec::with_capacity(seq.len());
    for x in seq {
        let xn = apply_norm(x, &input.norm)?;
        qs.push(input.wq.vecmat(&xn));
        ks.push(input.wk.vecmat(&xn));
    }
    let (mut checked, mut violations) = (0u64, 0u64);
    let (mut margin, mut boundary) = (f64::NEG_INFINITY, 0.0f64);
    for m in horizon..seq.len() {
        let scores: Vec<f64> = (0..=m)
            .map(|n| dot(&qs[m], &ks[n]) - input.slope * (m - n) as f64)
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
        for n in 0..=(m - horizon) {
            let w = (scores[n] - max).exp() / total;
            checked += 1;
            if w > input.epsilon {
                violations += 1;
            }
            margin = margin.max(w - input.epsilon);
            if m - n == horizon {
                boundary = boundary.max(w);
            }
        }
    }
    Ok((checked, violations, margin, boundary))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScopePolicy {
    Retrieval,
    Window,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadScope {
    pub layer: usize,
    pub head: usize,
    pub slope: f64,
    pub spectral_norm: f64,
    /// Real-valued bound.
    pub scope: f64,
    /// `ceil(scope)` in tokens.
    pub l_h: u64,
    pub policy: ScopePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScopePlan {
    pub epsilon: f64,
    pub max_context: usize,
    pub heads: Vec<HeadScope>,
}

impl ScopePlan {
    /// Windows keep every key within `l_h` of the query (the query itself
    /// included), so a window head stores `l_h + 1` tokens. Query heads that
    /// share a KV head take the widest scope in their group.
    pub fn policy_table(&self, model: &Model) -> Result<PolicyTable> {
        let spec = model.spec();
        let group = spec.group_size();
        let mut policies = Vec::with_capacity(spec.total_heads());
        for layer in self.heads.chunks(spec.num_heads) {
            for members in layer.chunks(group) {
                let policy = if members.iter().any(|h| h.policy == ScopePolicy::Retrieval) {
                    HeadPolicy::Retrieval
                } else {
                    let widest = members.iter().map(|h| h.l_h).max().unwrap_or(0);
                    HeadPolicy::Window {
                        sinks: 0,
                        window: widest as usize + 1,
                    }
                };
                policies.extend(std::iter::repeat_n(policy, members.len()));
            }
        }
        PolicyTable::new(spec, policies)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Per-head scopes of an ALiBi model. Heads whose scope reaches the context
/// limit keep a full cache.
pub fn plan_alibi_caches(model: &Model, epsilon: f64) -> Result<ScopePlan> {
    let spec = model.spec();
    let Positional::Alibi { slopes } = &spec.positional else {
        return Err(Error::config("vision scopes are only defined for ALiBi models"));
    };
    let d = spec.head_dim;
    let ids: Vec<(usize, usize)> = (0..spec.num_layers)
        .flat_map(|l| (0..spec.num_heads).map(move |h| (l, h)))
        .collect();
    let heads = ids
        .par_iter()
        .map(|&(l, h)| {
            let w = &model.layers()[l];
            let kv = spec.kv_head_of(h);
            let input = ScopeInput::new(
                w.wq.column_block(h * d, d).cast(),
                w.wk.column_block(kv * d, d).cast(),
                w.attn_norm.cast(),
                slopes[h],
                epsilon,
            )?;
            let (sigma, _, _) = spectral(&input.bilinear())?;
            let scope = scope_from(sigma, &input);
            let l_h = if scope.is_finite() { scope.ceil() as u64 } else { u64::MAX };
            Ok(HeadScope {
                layer: l,
                head: h,
                slope: slopes[h],
                spectral_norm: sigma,
                scope,
                l_h,
                policy: if l_h >= spec.max_context as u64 {
                    ScopePolicy::Retrieval
                } else {
                    ScopePolicy::Window
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScopePlan {
        epsilon,
        max_context: spec.max_context,
        heads,
    })
}
