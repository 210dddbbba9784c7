//! Positional machinery: rotary embeddings and ALiBi slopes/biases.

use crate::error::{Error, Result};
use crate::math::Real;

pub const DEFAULT_ROPE_THETA: f64 = 10_000.0;

/// Rotary embedding over interleaved pairs `(2i, 2i + 1)` with frequency
/// `theta_base^(-2i / head_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    head_dim: usize,
    theta_base: f64,
    inv_freq: Vec<f64>,
}

impl RopeConfig {
    pub fn new(head_dim: usize, theta_base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::config(format!("rope head_dim must be even and > 0, got {head_dim}")));
        }
        if !(theta_base > 1.0 && theta_base.is_finite()) {
            return Err(Error::config(format!("rope theta_base must be > 1, got {theta_base}")));
        }
        let inv_freq = (0..head_dim / 2)
            .map(|i| theta_base.powf(-2.0 * i as f64 / head_dim as f64))
            .collect();
        Ok(Self {
            head_dim,
            theta_base,
            inv_freq,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn theta_base(&self) -> f64 {
        self.theta_base
    }

    /// Angular frequency of pair `i`, in radians per position.
    pub fn frequency(&self, pair: usize) -> f64 {
        self.inv_freq[pair]
    }

    pub fn rotate<T: Real>(&self, v: &[T], position: usize) -> Result<Vec<T>> {
        self.rotate_by(v, position as f64)
    }

    /// Rotation by a signed (possibly negative) position offset.
    pub fn rotate_by<T: Real>(&self, v: &[T], offset: f64) -> Result<Vec<T>> {
        let mut out = v.to_vec();
        self.rotate_in_place(&mut out, offset)?;
        Ok(out)
    }

    pub fn rotate_in_place<T: Real>(&self, v: &mut [T], offset: f64) -> Result<()> {
        if v.len() != self.head_dim {
            return Err(Error::DimensionMismatch {
                context: "rope_rotate",
                expected: self.head_dim,
                actual: v.len(),
            });
        }
        for (pair, &freq) in v.chunks_exact_mut(2).zip(&self.inv_freq) {
            let (sin, cos) = (offset * freq).sin_cos();
            let (x, y) = (pair[0].as_f64(), pair[1].as_f64());
            pair[0] = T::of(x * cos - y * sin);
            pair[1] = T::of(x * sin + y * cos);
        }
        Ok(())
    }
}

pub fn rope_rotate<T: Real>(v: &[T], position: usize, cfg: &RopeConfig) -> Result<Vec<T>> {
    cfg.rotate(v, position)
}

/// Per-head ALiBi slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct AlibiConfig {
    slopes: Vec<f64>,
}

impl AlibiConfig {
    pub fn new(slopes: Vec<f64>) -> Result<Self> {
        if slopes.is_empty() {
            return Err(Error::config("alibi needs at least one head"));
        }
        if let Some(s) = slopes.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::config(format!("alibi slopes must be positive, got {s}")));
        }
        Ok(Self { slopes })
    }

    pub fn standard(num_heads: usize) -> Result<Self> {
        Self::new(alibi_slopes(num_heads)?)
    }

    pub fn num_heads(&self) -> usize {
        self.slopes.len()
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn slope(&self, head: usize) -> f64 {
        self.slopes[head]
    }
}

/// Geometric slope schedule `2^(-8(h+1)/num_heads)`.
pub fn alibi_slopes(num_heads: usize) -> Result<Vec<f64>> {
    if num_heads == 0 {
        return Err(Error::config("alibi_slopes needs at least one head"));
    }
    Ok((0..num_heads)
        .map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / num_heads as f64))
        .collect())
}

/// Linear bias `-slope·(m - n)` added to the score of query `m` on key `n`.
pub fn alibi_bias(m: usize, n: usize, slope: f64) -> Result<f64> {
    if m < n {
        return Err(Error::Causality { query: m, key: n });
    }
    Ok(-slope * (m - n) as f64)
}
