use crate::embeddings::{AlibiConfig, RopeConfig};
use crate::error::{Error, Result};
use crate::math::NormKind;

#[derive(Debug, Clone, PartialEq)]
pub enum Positional {
    Rope { theta_base: f64 },
    Alibi { slopes: Vec<f64> },
}

impl Positional {
    pub fn is_alibi(&self) -> bool {
        matches!(self, Self::Alibi { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Rope { .. } => "rope",
            Self::Alibi { .. } => "alibi",
        }
    }
}

/// Architecture of a decoder-only model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub num_layers: usize,
    pub num_heads: usize,
    /// Equal to `num_heads` for multi-head attention.
    pub num_kv_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub positional: Positional,
    pub norm_kind: NormKind,
    pub norm_eps: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("head_dim", self.head_dim),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_context", self.max_context),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.num_heads % self.num_kv_heads != 0 {
            return Err(Error::config(format!(
                "num_heads {} is not a multiple of num_kv_heads {}",
                self.num_heads, self.num_kv_heads
            )));
        }
        if self.hidden_dim != self.num_heads * self.head_dim {
            return Err(Error::config(format!(
                "hidden_dim {} != num_heads {} x head_dim {}",
                self.hidden_dim, self.num_heads, self.head_dim
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm epsilon must be positive"));
        }
        match &self.positional {
            Positional::Rope { theta_base } => {
                RopeConfig::new(self.head_dim, *theta_base)?;
            }
            Positional::Alibi { slopes } => {
                if slopes.len() != self.num_heads {
                    return Err(Error::config(format!(
                        "{} alibi slopes for {} heads",
                        slopes.len(),
                        self.num_heads
                    )));
                }
                AlibiConfig::new(slopes.clone())?;
            }
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.num_heads / self.num_kv_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }

    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    pub fn total_heads(&self) -> usize {
        self.num_layers * self.num_heads
    }

    pub fn rope(&self) -> Option<RopeConfig> {
        match &self.positional {
            Positional::Rope { theta_base } => RopeConfig::new(self.head_dim, *theta_base).ok(),
            Positional::Alibi { .. } => None,
        }
    }

    pub fn alibi(&self) -> Option<AlibiConfig> {
        match &self.positional {
            Positional::Alibi { slopes } => AlibiConfig::new(slopes.clone()).ok(),
            Positional::Rope { .. } => None,
        }
    }

    pub fn softmax_scale(&self) -> f64 {
        1.0 / (self.head_dim as f64).sqrt()
    }
}
