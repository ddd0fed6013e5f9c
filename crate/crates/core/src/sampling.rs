//! Seeded random instances, gated away from LayerNorm degeneracy and ReLU kinks
//! so that finite differences are meaningful.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::AttnParams;
use crate::block::{block_forward, BlockParams};
use crate::error::{Error, Result};
use crate::ffn::FfnParams;
use crate::layernorm::ln_state;
use crate::mat::Mat;
use crate::Dims;

/// Resampling gives up after this many draws.
pub const MAX_DRAWS: usize = 1000;

#[derive(Debug, Clone, Copy)]
pub struct Gate {
    /// Minimum per-row standard deviation at every LayerNorm input.
    pub min_sigma: f64,
    /// Minimum `|Y·W₁|` entry.
    pub min_kink: f64,
}

impl Default for Gate {
    fn default() -> Gate {
        Gate {
            min_sigma: 0.1,
            min_kink: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub seed: u64,
    /// Number of rejected draws before this one.
    pub rejected: usize,
    pub x: Mat,
    pub target: Mat,
    pub params: BlockParams,
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// i.i.d. `N(0, scale²)` entries.
pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Weights with entries `N(0, 1/fan_in)`.
pub fn random_params(dims: Dims, rng: &mut impl Rng) -> BlockParams {
    let w = |rng: &mut _, r: usize, c: usize| gaussian(rng, r, c, 1.0 / (r as f64).sqrt());
    let attn = AttnParams {
        wq: w(rng, dims.d_v, dims.d_k),
        wk: w(rng, dims.d_v, dims.d_k),
        wv: w(rng, dims.d_v, dims.d_v),
        dims,
    };
    let ffn = FfnParams {
        w1: w(rng, dims.d_v, dims.d_ff),
        w2: w(rng, dims.d_ff, dims.d_v),
    };
    BlockParams { attn, ffn }
}

fn draw(dims: Dims, rng: &mut impl Rng) -> (Mat, Mat, BlockParams) {
    let x = gaussian(rng, dims.l, dims.d_v, 1.0);
    let target = gaussian(rng, dims.l, dims.d_v, 1.0);
    (x, target, random_params(dims, rng))
}

/// `Err` carries the reason for rejection.
fn admit(x: &Mat, p: &BlockParams, gate: &Gate) -> Result<()> {
    let low = |s: f64, what: &str| {
        if s < gate.min_sigma {
            Err(Error::Config(format!("row std {s:e} at {what} below {}", gate.min_sigma)))
        } else {
            Ok(())
        }
    };
    low(ln_state(x)?.sigma_min(), "input")?;
    let st = block_forward(x, p)?;
    low(st.y_ln.sigma_min(), "Y")?;
    low(st.z_ln.sigma_min(), "Z")?;
    if st.mask.kink_margin < gate.min_kink {
        return Err(Error::KinkProximity {
            margin: st.mask.kink_margin,
        });
    }
    Ok(())
}

/// Deterministic in `(dims, seed, gate)`: draws until the gate passes.
pub fn gated_instance(dims: Dims, seed: u64, gate: &Gate) -> Result<Instance> {
    let mut r = rng(seed);
    let mut last = None;
    for rejected in 0..MAX_DRAWS {
        let (x, target, params) = draw(dims, &mut r);
        match admit(&x, &params, gate) {
            Ok(()) => {
                return Ok(Instance {
                    seed,
                    rejected,
                    x,
                    target,
                    params,
                })
            }
            Err(e) => last = Some(e),
        }
    }
    Err(Error::Config(format!(
        "no admissible instance for seed {seed} after {MAX_DRAWS} draws at {dims:?}; last rejection: {}",
        last.map_or_else(String::new, |e| e.to_string())
    )))
}

pub fn instance(dims: Dims, seed: u64) -> Result<Instance> {
    gated_instance(dims, seed, &Gate::default())
}
