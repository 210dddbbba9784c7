//! Small deterministic models for tests, benches and the CLI.
//!
//! [`induction_model`] is wired by hand so that its retrieval heads are known
//! in advance: layer 0 head 0 copies the previous token, layer 0 head 1 is an
//! echo head and layer 1 head 0 is an induction head. All other heads and
//! every MLP are zero.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::embeddings::alibi_slopes;
use crate::error::Result;
use crate::math::{Matrix, NormKind, NormParams};
use crate::rng::SeedStream;

use super::{LayerWeights, Model, ModelSpec, Positional};

pub fn tiny_rope_spec() -> ModelSpec {
    ModelSpec {
        num_layers: 2,
        num_heads: 4,
        num_kv_heads: 2,
        head_dim: 8,
        hidden_dim: 32,
        ffn_dim: 64,
        vocab_size: 64,
        max_context: 2048,
        positional: Positional::Rope { theta_base: 10_000.0 },
        norm_kind: NormKind::RmsNorm,
        norm_eps: 1e-5,
    }
}

pub fn tiny_alibi_spec() -> ModelSpec {
    let heads = 8;
    ModelSpec {
        num_layers: 2,
        num_heads: heads,
        num_kv_heads: heads,
        head_dim: 8,
        hidden_dim: 64,
        ffn_dim: 128,
        vocab_size: 64,
        max_context: 1024,
        positional: Positional::Alibi {
            slopes: alibi_slopes(heads).expect("non-zero head count"),
        },
        norm_kind: NormKind::LayerNorm,
        norm_eps: 1e-5,
    }
}

/// Gaussian weights scaled by `1/sqrt(fan_in)`; norm gains near 1.
pub fn random_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = SeedStream::new(seed).stream("weights");
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    let mut mat = |rows: usize, cols: usize, std: f64| {
        let data = (0..rows * cols).map(|_| (unit.sample(&mut rng) * std) as f32).collect();
        Matrix::new(rows, cols, data)
    };
    let (h, kv, f, v) = (spec.hidden_dim, spec.kv_dim(), spec.ffn_dim, spec.vocab_size);
    let inv = |n: usize| 1.0 / (n as f64).sqrt();

    let embed = mat(v, h, 1.0)?;
    let mut layers = Vec::with_capacity(spec.num_layers);
    for _ in 0..spec.num_layers {
        layers.push(LayerWeights {
            attn_norm: NormParams::unit(spec.norm_kind, h, spec.norm_eps),
            wq: mat(h, h, inv(h))?,
            wk: mat(h, kv, inv(h))?,
            wv: mat(h, kv, inv(h))?,
            wo: mat(h, h, inv(h))?,
            ffn_norm: NormParams::unit(spec.norm_kind, h, spec.norm_eps),
            w_gate: mat(h, f, inv(h))?,
            w_up: mat(h, f, inv(h))?,
            w_down: mat(f, h, inv(f))?,
        });
    }
    let final_norm = NormParams::unit(spec.norm_kind, h, spec.norm_eps);
    let lm_head = mat(h, v, inv(h))?;

    let mut norm_rng = SeedStream::new(seed).stream("norms");
    let mut perturb = |n: &NormParams<f32>| {
        let gamma = (0..h).map(|_| norm_rng.random_range(0.8f32..1.2)).collect();
        let bias = match spec.norm_kind {
            NormKind::LayerNorm => (0..h).map(|_| norm_rng.random_range(-0.1f32..0.1)).collect(),
            NormKind::RmsNorm => vec![0.0; h],
        };
        NormParams::new(n.kind(), gamma, bias, n.epsilon())
    };
    for layer in &mut layers {
        layer.attn_norm = perturb(&layer.attn_norm)?;
        layer.ffn_norm = perturb(&layer.ffn_norm)?;
    }
    let final_norm = perturb(&final_norm)?;
    Model::new(spec.clone(), embed, layers, final_norm, lm_head)
}

pub const INDUCTION_VOCAB: usize = 32;
/// Rotary base large enough that the upper half of each head is nearly
/// position-free across the whole context.
pub const INDUCTION_THETA: f64 = 1e8;

// residual stream layout
const TOK: usize = 0;
const PREV: usize = 32;
const CONST: usize = 64;
const IND: usize = 65;

// target pre-softmax scores
const PREV_PAIR_SCORE: f64 = 20.0;
const MATCH_SCORE: f64 = 16.0;
const LOGIT_GAIN: f32 = 2.0;

pub fn induction_spec() -> ModelSpec {
    ModelSpec {
        num_layers: 2,
        num_heads: 4,
        num_kv_heads: 4,
        head_dim: 64,
        hidden_dim: 256,
        ffn_dim: 8,
        vocab_size: INDUCTION_VOCAB,
        max_context: 1024,
        positional: Positional::Rope {
            theta_base: INDUCTION_THETA,
        },
        norm_kind: NormKind::RmsNorm,
        norm_eps: 1e-6,
    }
}

/// Two-layer model with a known previous-token head, echo head and
/// induction head. Greedy decoding continues any repeated pattern.
pub fn induction_model() -> Result<Model> {
    let spec = induction_spec();
    let (h, d, v) = (spec.hidden_dim, spec.head_dim, spec.vocab_size);
    let half = d / 2;
    let scale = spec.softmax_scale();
    let rope = spec.rope().expect("rope spec");
    // RMS-normalized magnitude of a one-hot entry with `active` unit entries
    let normed = |active: f64| (h as f64 / active).sqrt();

    let embed = Matrix::from_fn(v, h, |t, j| if j == TOK + t || j == CONST { 1.0 } else { 0.0 });

    let zero = || LayerWeights {
        attn_norm: NormParams::unit(NormKind::RmsNorm, h, spec.norm_eps),
        wq: Matrix::zeros(h, h),
        wk: Matrix::zeros(h, h),
        wv: Matrix::zeros(h, h),
        wo: Matrix::zeros(h, h),
        ffn_norm: NormParams::unit(NormKind::RmsNorm, h, spec.norm_eps),
        w_gate: Matrix::zeros(h, spec.ffn_dim),
        w_up: Matrix::zeros(h, spec.ffn_dim),
        w_down: Matrix::zeros(spec.ffn_dim, h),
    };

    // layer 0 sees token + constant
    let c0 = normed(2.0);
    let mut l0 = zero();
    // head 0: previous token, from the constant channel over the fast pairs
    let amp = (PREV_PAIR_SCORE / (scale * c0 * c0)).sqrt();
    for pair in 0..half / 2 {
        let theta = rope.frequency(pair);
        l0.wq.set(CONST, 2 * pair, amp as f32);
        l0.wk.set(CONST, 2 * pair, (amp * theta.cos()) as f32);
        l0.wk.set(CONST, 2 * pair + 1, (amp * theta.sin()) as f32);
    }
    for t in 0..v {
        l0.wv.set(TOK + t, t, (1.0 / c0) as f32);
        l0.wo.set(t, PREV + t, 1.0);
    }
    // head 1: echo, token matched against token over the slow pairs
    let beta0 = (MATCH_SCORE / (scale * c0 * c0)).sqrt() as f32;
    for t in 0..v {
        l0.wq.set(TOK + t, d + half + t, beta0);
        l0.wk.set(TOK + t, d + half + t, beta0);
    }

    // layer 1 sees token + previous token + constant
    let c1 = normed(3.0);
    let mut l1 = zero();
    let beta1 = (MATCH_SCORE / (scale * c1 * c1)).sqrt() as f32;
    for t in 0..v {
        l1.wq.set(TOK + t, half + t, beta1);
        l1.wk.set(PREV + t, half + t, beta1);
        l1.wv.set(TOK + t, t, (1.0 / c1) as f32);
        l1.wo.set(t, IND + t, 1.0);
    }

    let lm_head = Matrix::from_fn(h, v, |j, t| if j == IND + t { LOGIT_GAIN } else { 0.0 });
    Model::new(
        spec.clone(),
        embed,
        vec![l0, l1],
        NormParams::unit(NormKind::RmsNorm, h, spec.norm_eps),
        lm_head,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identify::TokenId;

    #[test]
    fn random_models_are_deterministic_and_valid() {
        for spec in [tiny_rope_spec(), tiny_alibi_spec()] {
            let a = random_model(&spec, 7).unwrap();
            assert_eq!(a, random_model(&spec, 7).unwrap());
            assert_ne!(a, random_model(&spec, 8).unwrap());
        }
    }

    #[test]
    fn previous_token_scores_peak_at_distance_one() {
        let spec = induction_spec();
        let rope = spec.rope().unwrap();
        let score = |delta: f64| -> f64 {
            (0..spec.head_dim / 4)
                .map(|i| ((delta - 1.0) * rope.frequency(i)).cos())
                .sum::<f64>()
                * PREV_PAIR_SCORE
        };
        let peak = score(1.0);
        let runner_up = (0..spec.max_context)
            .filter(|&d| d != 1)
            .map(|d| score(d as f64))
            .fold(f64::NEG_INFINITY, f64::max);
        // softmax mass off the previous token is below max_context * e^-margin
        assert!(peak - runner_up > 12.0, "margin {}", peak - runner_up);
    }

    #[test]
    fn continues_a_repeated_pattern() {
        let model = induction_model().unwrap();
        let block: Vec<TokenId> = vec![3, 17, 5, 29, 11, 0, 8, 22, 14, 1];
        let prompt: Vec<TokenId> = block.iter().chain(&block[..4]).copied().collect();
        let out = model.reference_generate(&prompt, 6).unwrap();
        assert_eq!(out, block[4..10].to_vec());
    }
}
