//! Post-norm Transformer block
//!
//! ```text
//! Y = LayerNorm(X + F(X)),   S = ReLU(Y·W₁)·W₂ + Y,   Z = LayerNorm(S)
//! ```
//!
//! with all parameter Jacobians, the Hessian blocks of `Z` and the MSE loss
//! Hessian. Parameters are ordered `W₁, W₂, W_K, W_Q, W_V` everywhere.

use std::sync::OnceLock;

use rayon::prelude::*;
use serde::Serialize;

use crate::attention::{self, attn_forward, g_dual, AttnParams, AttnState};
use crate::error::{shape_check, Result, Site};
use crate::ffn::{b1_jacobian, b2_jacobian, jsy, relu, relu_jacobian, FfnParams, ReluMask};
use crate::layernorm::{ln_state_at, LnState};
use crate::mat::Mat;
use crate::matcalc::{kron, product_rule, vec_r, Dual};
use crate::norms::spectral;
use crate::{Dims, WeightTag};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub attn: AttnParams,
    pub ffn: FfnParams,
}

impl BlockParams {
    pub fn dims(&self) -> Dims {
        self.attn.dims
    }

    pub fn weight(&self, tag: WeightTag) -> &Mat {
        match tag {
            WeightTag::W1 => &self.ffn.w1,
            WeightTag::W2 => &self.ffn.w2,
            t => self.attn.weight(t),
        }
    }

    pub fn weight_mut(&mut self, tag: WeightTag) -> &mut Mat {
        match tag {
            WeightTag::W1 => &mut self.ffn.w1,
            WeightTag::W2 => &mut self.ffn.w2,
            t => self.attn.weight_mut(t),
        }
    }

    fn check(&self) -> Result<()> {
        let d = self.dims();
        for tag in WeightTag::BLOCK {
            let w = self.weight(tag);
            shape_check(w.shape() == tag.shape(&d), "block weight", w.shape(), tag.shape(&d))?;
        }
        Ok(())
    }
}

/// Forward pass plus the first-order pieces every derivative query needs.
/// LayerNorm Hessians are built on first use.
#[derive(Debug)]
pub struct BlockState {
    pub x: Mat,
    pub attn: AttnState,
    pub y_ln: LnState,
    pub y: Mat,
    pub mask: ReluMask,
    pub s: Mat,
    pub z_ln: LnState,
    pub z: Mat,
    pub j_y: Mat,
    pub j_z: Mat,
    pub j_sy: Mat,
    pub params: BlockParams,
    h_y: OnceLock<Mat>,
    h_z: OnceLock<Mat>,
}

pub fn block_forward(x: &Mat, p: &BlockParams) -> Result<BlockState> {
    p.check()?;
    let attn = attn_forward(x, &p.attn)?;
    let y_ln = ln_state_at(&(x + &attn.f), Site::Y)?;
    let y = y_ln.output();
    let mask = relu_jacobian(&y.dot(&p.ffn.w1));
    let s = &relu(&y.dot(&p.ffn.w1)).dot(&p.ffn.w2) + &y;
    let z_ln = ln_state_at(&s, Site::Z)?;
    let z = z_ln.output();
    let j_y = y_ln.jacobian();
    let j_z = z_ln.jacobian();
    let j_sy = jsy(&y, &p.ffn)?;
    Ok(BlockState {
        x: x.clone(),
        attn,
        y_ln,
        y,
        mask,
        s,
        z_ln,
        z,
        j_y,
        j_z,
        j_sy,
        params: p.clone(),
        h_y: OnceLock::new(),
        h_z: OnceLock::new(),
    })
}

impl BlockState {
    pub fn dims(&self) -> Dims {
        self.params.dims()
    }

    /// Hessian of the inner LayerNorm at `X + F`.
    pub fn h_y(&self) -> &Mat {
        self.h_y.get_or_init(|| self.y_ln.hessian())
    }

    /// Hessian of the outer LayerNorm at `S`.
    pub fn h_z(&self) -> &Mat {
        self.h_z.get_or_init(|| self.z_ln.hessian())
    }

    /// `B_i = ∂S/∂W_i`.
    pub fn b(&self, tag: WeightTag) -> Result<Mat> {
        let p = &self.params;
        match tag {
            WeightTag::W1 => b1_jacobian(&self.y, &p.ffn),
            WeightTag::W2 => b2_jacobian(&self.y, &p.ffn),
            k => Ok(self.j_sy.dot(&self.j_y).dot(&attention::g(&self.x, &p.attn, k)?)),
        }
    }

    /// `∂Z/∂W_i = J_Z·B_i`.
    pub fn jacobian(&self, tag: WeightTag) -> Result<Mat> {
        Ok(self.j_z.dot(&self.b(tag)?))
    }

    /// `∂vec_r(Y)/∂W_j`, zero for the FFN weights.
    fn y_jac(&self, j: WeightTag) -> Result<Option<Mat>> {
        if j.is_attention() {
            Ok(Some(self.j_y.dot(&attention::g(&self.x, &self.params.attn, j)?)))
        } else {
            Ok(None)
        }
    }

    /// `ξ_ij = ∂vec_r(B_i)/∂vec_r(W_j)ᵀ`, size (L·d_V·n_i)×n_j. `D_σ` is held
    /// fixed (ReLU is piecewise linear).
    pub fn xi(&self, i: WeightTag, j: WeightTag) -> Result<Mat> {
        let p = &self.params;
        let d = self.dims();
        let nv = j.size(&d);
        let c = |m: Mat| Dual::constant(m, nv);
        let w = |tag: WeightTag| {
            let m = p.weight(tag).clone();
            if tag == j {
                Dual::variable(m)
            } else {
                c(m)
            }
        };
        let d_sigma = c(self.mask.d_sigma.clone());
        let eye_l = c(Mat::eye(d.l));
        let out = match i {
            WeightTag::W1 => {
                let y = match self.y_jac(j)? {
                    Some(dy) => Dual::with_jac(self.y.clone(), dy),
                    None => c(self.y.clone()),
                };
                eye_l
                    .kron(&w(WeightTag::W2).t())
                    .mul(&d_sigma)
                    .mul(&y.kron(&c(Mat::eye(d.d_ff))))
            }
            WeightTag::W2 => {
                let y = match self.y_jac(j)? {
                    Some(dy) => Dual::with_jac(self.y.clone(), dy),
                    None => c(self.y.clone()),
                };
                let u = y.mul(&w(WeightTag::W1));
                let r = match &u.jac {
                    None => c(relu(&u.val)),
                    Some(du) => Dual::with_jac(relu(&u.val), self.mask.d_sigma.dot(du)),
                };
                r.kron(&c(Mat::eye(d.d_v)))
            }
            k => {
                let core = eye_l
                    .kron(&w(WeightTag::W2).t())
                    .mul(&d_sigma)
                    .mul(&eye_l.kron(&w(WeightTag::W1).t()));
                let j_sy = core.add(&c(Mat::eye(d.l * d.d_v)));
                // J_Y is evaluated at X + F, whose derivative is G_j.
                let j_y = if j.is_attention() {
                    let g = attention::g(&self.x, &p.attn, j)?;
                    Dual::with_jac(self.j_y.clone(), self.h_y().dot(&g))
                } else {
                    c(self.j_y.clone())
                };
                j_sy.mul(&j_y.mul(&g_dual(&self.x, &p.attn, k, j)?))
            }
        };
        Ok(out.jac_or_zero())
    }

    /// The two terms of `ξ_kℓ` for attention weights `k, ℓ`:
    /// `(J_SY⊗I)(I⊗G_kᵀ)(H_Y·G_ℓ)` and `(J_SY⊗I)(J_Y⊗I)Φ_kℓ`.
    pub fn xi_attention_terms(&self, k: WeightTag, l: WeightTag) -> Result<(Mat, Mat)> {
        let a = &self.params.attn;
        let nk = k.size(&self.dims());
        let p = self.j_y.rows();
        let gk = attention::g(&self.x, a, k)?;
        let gl = attention::g(&self.x, a, l)?;
        let left = kron(&self.j_sy, &Mat::eye(nk));
        let hy_term = left.dot(&kron(&Mat::eye(p), &gk.t()).dot(&self.h_y().dot(&gl)));
        let phi_term = left
            .dot(&kron(&self.j_y, &Mat::eye(nk)))
            .dot(&attention::phi(&self.x, a, k, l)?);
        Ok((hy_term, phi_term))
    }

    /// `H_tr^{(i,j)} = (J_Z⊗I_{n_i})ξ_ij + (I_{L·d_V}⊗B_iᵀ)·H_Z·B_j`.
    pub fn hessian(&self, i: WeightTag, j: WeightTag) -> Result<Mat> {
        let bi = self.b(i)?;
        let hz_bj = self.h_z().dot(&self.b(j)?);
        product_rule(&self.j_z, &hz_bj, &bi, &self.xi(i, j)?)
    }

    /// Same block with every Kronecker factor formed explicitly.
    pub fn hessian_explicit(&self, i: WeightTag, j: WeightTag) -> Result<Mat> {
        let ni = i.size(&self.dims());
        let bi = self.b(i)?;
        let t1 = kron(&self.j_z, &Mat::eye(ni)).dot(&self.xi(i, j)?);
        let t2 = kron(&Mat::eye(self.j_z.rows()), &bi.t())
            .dot(self.h_z())
            .dot(&self.b(j)?);
        Ok(&t1 + &t2)
    }
}

pub fn block_jacobian(x: &Mat, p: &BlockParams, tag: WeightTag) -> Result<Mat> {
    block_forward(x, p)?.jacobian(tag)
}

pub fn xi(x: &Mat, p: &BlockParams, i: WeightTag, j: WeightTag) -> Result<Mat> {
    block_forward(x, p)?.xi(i, j)
}

pub fn block_hessian(x: &Mat, p: &BlockParams, i: WeightTag, j: WeightTag) -> Result<Mat> {
    block_forward(x, p)?.hessian(i, j)
}

/// MSE `‖Z − Target‖²_F/(L·d_V)`.
pub fn mse(z: &Mat, target: &Mat) -> f64 {
    (z - target).frobenius().powi(2) / z.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    /// Bare self-attention, parameters `W_K, W_Q, W_V`.
    Attn,
    /// Full block, parameters `W₁, W₂, W_K, W_Q, W_V`.
    Block,
}

impl Model {
    pub fn tags(self) -> &'static [WeightTag] {
        match self {
            Model::Attn => &WeightTag::ATTN,
            Model::Block => &WeightTag::BLOCK,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairBlock {
    pub i: WeightTag,
    pub j: WeightTag,
    /// Second derivative of the model output, stacked (L·d_V·n_i)×n_j.
    #[serde(skip)]
    pub model_block: Mat,
    pub model_norm: f64,
    /// For the block model: `‖J_Z‖‖ξ_ij‖ + ‖B_i‖‖H_Z‖‖B_j‖` with measured
    /// norms. For attention: `‖outer‖ + ‖functional‖`.
    pub model_bound: f64,
    #[serde(skip)]
    pub outer: Mat,
    #[serde(skip)]
    pub functional: Mat,
    /// `outer + functional`, n_i×n_j.
    #[serde(skip)]
    pub loss_block: Mat,
    pub loss_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HessianReport {
    pub model: Model,
    pub loss: f64,
    pub pairs: Vec<PairBlock>,
    #[serde(skip)]
    pub assembled: Mat,
    pub full_norm: f64,
    /// Spectral-norm bound on `assembled` from the bounds module.
    pub bound: f64,
}

impl HessianReport {
    pub fn pair(&self, i: WeightTag, j: WeightTag) -> &PairBlock {
        self.pairs
            .iter()
            .find(|b| b.i == i && b.j == j)
            .expect("pair present in grid")
    }

    /// Outer and functional parts assembled separately.
    pub fn split(&self) -> (Mat, Mat) {
        let grid = |f: fn(&PairBlock) -> &Mat| {
            let n = (self.pairs.len() as f64).sqrt() as usize;
            let rows: Vec<Vec<Mat>> = (0..n)
                .map(|r| (0..n).map(|c| f(&self.pairs[r * n + c]).clone()).collect())
                .collect();
            Mat::from_blocks(&rows)
        };
        (grid(|b| &b.outer), grid(|b| &b.functional))
    }

    /// `max |H − Hᵀ| / max |H|`.
    pub fn asymmetry(&self) -> f64 {
        let h = &self.assembled;
        (h - &h.t()).max_abs() / h.max_abs().max(f64::MIN_POSITIVE)
    }
}

/// `(gᵀ⊗I_{n_i})·H` for a stacked second derivative `H` of size (len(g)·n_i)×n_j.
pub fn contract(g: &Mat, h: &Mat, ni: usize) -> Mat {
    let nj = h.cols();
    let mut out = Mat::zeros(ni, nj);
    for (o, &go) in g.data().iter().enumerate() {
        if go == 0.0 {
            continue;
        }
        for a in 0..ni {
            let row = h.row(o * ni + a);
            for b in 0..nj {
                out[(a, b)] += go * row[b];
            }
        }
    }
    out
}

/// Shared assembly: `jac(i)` gives `∂out/∂W_i`, `second(i,j)` the stacked
/// second derivative, `resid` is `out − Target`.
fn assemble<J, S>(
    model: Model,
    dims: &Dims,
    resid: &Mat,
    jac: J,
    second: S,
    bound_of: impl Fn(&PairBlock) -> f64 + Sync,
) -> Result<HessianReport>
where
    J: Fn(WeightTag) -> Result<Mat> + Sync,
    S: Fn(WeightTag, WeightTag) -> Result<Mat> + Sync,
{
    let tags = model.tags();
    let scale = 2.0 / resid.len() as f64;
    let g = vec_r(resid).scale(scale);
    let jacs: Vec<Mat> = tags.iter().map(|&t| jac(t)).collect::<Result<_>>()?;
    let idx: Vec<(usize, usize)> = (0..tags.len())
        .flat_map(|r| (0..tags.len()).map(move |c| (r, c)))
        .collect();
    let pairs: Vec<PairBlock> = idx
        .par_iter()
        .map(|&(r, c)| {
            let (i, j) = (tags[r], tags[c]);
            let model_block = second(i, j)?;
            let outer = jacs[r].t().dot(&jacs[c]).scale(scale);
            let functional = contract(&g, &model_block, i.size(dims));
            let loss_block = &outer + &functional;
            let mut pb = PairBlock {
                i,
                j,
                model_norm: spectral(&model_block)?,
                model_bound: 0.0,
                loss_norm: spectral(&loss_block)?,
                model_block,
                outer,
                functional,
                loss_block,
            };
            pb.model_bound = bound_of(&pb);
            Ok(pb)
        })
        .collect::<Result<_>>()?;
    let n = tags.len();
    let rows: Vec<Vec<Mat>> = (0..n)
        .map(|r| (0..n).map(|c| pairs[r * n + c].loss_block.clone()).collect())
        .collect();
    let assembled = Mat::from_blocks(&rows);
    Ok(HessianReport {
        model,
        loss: resid.frobenius().powi(2) / resid.len() as f64,
        pairs,
        full_norm: spectral(&assembled)?,
        assembled,
        bound: 0.0,
    })
}

/// Block-model MSE loss Hessian over `(W₁, W₂, W_K, W_Q, W_V)`.
pub fn loss_hessian(x: &Mat, target: &Mat, p: &BlockParams) -> Result<HessianReport> {
    let st = block_forward(x, p)?;
    shape_check(target.shape() == st.z.shape(), "loss target", target.shape(), st.z.shape())?;
    let d = p.dims();
    let jz = spectral(&st.j_z)?;
    let hz = spectral(st.h_z())?;
    let bnorm: Vec<f64> = WeightTag::BLOCK
        .iter()
        .map(|&t| spectral(&st.b(t)?))
        .collect::<Result<_>>()?;
    let pos = |t: WeightTag| WeightTag::BLOCK.iter().position(|&u| u == t).unwrap_or(0);
    let mut rep = assemble(
        Model::Block,
        &d,
        &(&st.z - target),
        |t| st.jacobian(t),
        |i, j| st.hessian(i, j),
        |pb| {
            let xi = st.xi(pb.i, pb.j).and_then(|m| spectral(&m)).unwrap_or(f64::NAN);
            jz * xi + bnorm[pos(pb.i)] * hz * bnorm[pos(pb.j)]
        },
    )?;
    rep.bound = crate::bounds::m_tr(&st, target)?;
    Ok(rep)
}

/// Self-attention MSE loss Hessian over `(W_K, W_Q, W_V)`.
pub fn sa_loss_hessian(x: &Mat, target: &Mat, p: &AttnParams) -> Result<HessianReport> {
    let st = attn_forward(x, p)?;
    shape_check(target.shape() == st.f.shape(), "loss target", target.shape(), st.f.shape())?;
    let mut rep = assemble(
        Model::Attn,
        &p.dims,
        &(&st.f - target),
        |t| attention::g(x, p, t),
        |i, j| attention::phi(x, p, i, j),
        |pb| spectral(&pb.outer).unwrap_or(f64::NAN) + spectral(&pb.functional).unwrap_or(f64::NAN),
    )?;
    rep.bound = crate::bounds::sa_m(x, target, p, crate::bounds::Variant::Appendix)?;
    Ok(rep)
}
