//! Closed-form first and second derivatives of LayerNorm, ReLU feed-forward,
//! single-head self-attention and post-norm Transformer blocks under row-wise
//! vectorization, the spectral-norm bounds built on them, and finite-difference
//! oracles that check every formula.

pub mod attention;
pub mod block;
pub mod bounds;
pub mod cli;
pub mod convergence;
pub mod error;
pub mod ffn;
pub mod layernorm;
pub mod mat;
pub mod matcalc;
pub mod norms;
pub mod oracle;
pub mod sampling;
pub mod suite;

use serde::Serialize;

pub use error::{Error, Result, Site};
pub use mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    #[serde(rename = "L")]
    pub l: usize,
    pub d_v: usize,
    pub d_k: usize,
    pub d_ff: usize,
}

impl Dims {
    pub fn new(l: usize, d_v: usize, d_k: usize, d_ff: usize) -> Result<Dims> {
        if l == 0 || d_v == 0 || d_k == 0 || d_ff == 0 {
            return Err(Error::Config(format!(
                "all dims must be positive, got L={l} dV={d_v} dK={d_k} dff={d_ff}"
            )));
        }
        Ok(Dims { l, d_v, d_k, d_ff })
    }

    /// L=3, d_V=4, d_K=2, d_ff=4.
    pub fn small() -> Dims {
        Dims {
            l: 3,
            d_v: 4,
            d_k: 2,
            d_ff: 4,
        }
    }
}

/// Weight matrices, in the block parameter order `W₁, W₂, W_K, W_Q, W_V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum WeightTag {
    W1,
    W2,
    K,
    Q,
    V,
}

impl WeightTag {
    pub const BLOCK: [WeightTag; 5] = [
        WeightTag::W1,
        WeightTag::W2,
        WeightTag::K,
        WeightTag::Q,
        WeightTag::V,
    ];
    pub const ATTN: [WeightTag; 3] = [WeightTag::K, WeightTag::Q, WeightTag::V];

    pub fn shape(self, d: &Dims) -> (usize, usize) {
        match self {
            WeightTag::W1 => (d.d_v, d.d_ff),
            WeightTag::W2 => (d.d_ff, d.d_v),
            WeightTag::K | WeightTag::Q => (d.d_v, d.d_k),
            WeightTag::V => (d.d_v, d.d_v),
        }
    }

    /// Number of scalar entries.
    pub fn size(self, d: &Dims) -> usize {
        let (r, c) = self.shape(d);
        r * c
    }

    pub fn is_attention(self) -> bool {
        matches!(self, WeightTag::K | WeightTag::Q | WeightTag::V)
    }

    pub fn label(self) -> &'static str {
        match self {
            WeightTag::W1 => "1",
            WeightTag::W2 => "2",
            WeightTag::K => "K",
            WeightTag::Q => "Q",
            WeightTag::V => "V",
        }
    }
}
