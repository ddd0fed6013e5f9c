//! Spectral-norm estimates as executable formulas, each paired with the
//! measured norm it is supposed to dominate.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::attention::{
    self, attn_forward, shuffle, softmax_hessian, softmax_hessian_block, softmax_jacobian, z1, z2,
    AttnParams,
};
use crate::block::{block_forward, loss_hessian, sa_loss_hessian, BlockParams, BlockState, Model};
use crate::error::{shape_check, Result};
use crate::layernorm::ln_state;
use crate::mat::Mat;
use crate::norms::{numerical_rank, spectral};
use crate::WeightTag;

/// Roundoff allowance: a bound holds when `slack ≥ −SLACK_TOL·rhs`.
pub const SLACK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub name: String,
    /// Measured norm.
    pub lhs: f64,
    /// Analytic bound.
    pub rhs: f64,
    pub slack: f64,
    /// First 16 hex digits of a SHA-256 over the instance's matrices.
    pub inputs_digest: String,
}

impl BoundReport {
    pub fn new(name: impl Into<String>, lhs: f64, rhs: f64, digest: &str) -> BoundReport {
        BoundReport {
            name: name.into(),
            lhs,
            rhs,
            slack: rhs - lhs,
            inputs_digest: digest.to_string(),
        }
    }

    pub fn holds(&self) -> bool {
        self.lhs.is_finite() && self.rhs.is_finite() && self.slack >= -SLACK_TOL * self.rhs.abs()
    }
}

pub fn digest(mats: &[&Mat]) -> String {
    let mut h = Sha256::new();
    for m in mats {
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Constant set for the self-attention bound `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// The constants the derivation actually arrives at, with the numerical
    /// rank of `F − Target`.
    #[default]
    Appendix,
    /// The constants quoted with the headline statement, with
    /// `min(L, d_V)` in place of the rank.
    Maintext,
}

/// Spectral norms feeding the self-attention bound.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SaInputs {
    pub l: usize,
    pub d_v: usize,
    pub d_k: usize,
    pub x: f64,
    pub wq: f64,
    pub wk: f64,
    pub wv: f64,
    pub target: f64,
    /// Numerical rank of `F − Target`.
    pub rank: usize,
}

impl SaInputs {
    pub fn measure(x: &Mat, target: &Mat, p: &AttnParams) -> Result<SaInputs> {
        let st = attn_forward(x, p)?;
        shape_check(target.shape() == st.f.shape(), "bound target", target.shape(), st.f.shape())?;
        Ok(SaInputs {
            l: p.dims.l,
            d_v: p.dims.d_v,
            d_k: p.dims.d_k,
            x: spectral(x)?,
            wq: spectral(&p.wq)?,
            wk: spectral(&p.wk)?,
            wv: spectral(&p.wv)?,
            target: spectral(target)?,
            rank: numerical_rank(&(&st.f - target))?,
        })
    }
}

/// The four expressions inside `M = 3·max(…)`.
pub fn sa_m_terms(s: &SaInputs, variant: Variant) -> [f64; 4] {
    let (l, dv, dk) = (s.l as f64, s.d_v as f64, s.d_k as f64);
    let x = s.x;
    let r = match variant {
        Variant::Appendix => s.rank,
        Variant::Maintext => s.l.min(s.d_v),
    };
    let sr = (r as f64).sqrt();
    let resid = l * x * s.wv + s.target;
    let t1 = 2.0 * l / dv * x.powi(2);
    match variant {
        Variant::Appendix => [
            t1,
            2.0 / (l.powi(3) * dv * dk) * s.wk.powi(2) * s.wv.powi(2) * x.powi(6)
                + 12.0 / (dv * dk) * sr * resid * s.wv * s.wk.powi(2) * x.powi(5),
            2.0 / (l * dv * dk.sqrt()) * s.wv * s.wk * x.powi(4)
                + 2.0 * sr / (l * l * (dv * dk).sqrt()) * resid * s.wk * x.powi(3),
            2.0 / (l.powi(3) * dv * dk) * s.wk * s.wq * s.wv.powi(2) * x.powi(6)
                + 2.0 * sr * resid / (l * dv * (dv * dk).sqrt())
                    * s.wv
                    * (3.0 * l * s.wk * s.wq * x.powi(5) + dv / l * x.powi(3)),
        ],
        Variant::Maintext => [
            t1,
            8.0 / (l.powi(3) * dv * dk) * s.wk.powi(2) * s.wv.powi(2) * x.powi(6)
                + 12.0 / (dv * dk) * sr * resid * s.wv * s.wk.powi(2) * x.powi(5),
            4.0 / (l * dv * dk.sqrt()) * s.wv * s.wk * x.powi(4)
                + 4.0 * sr / (l * l * dk.sqrt()) * resid * s.wk * x.powi(3),
            8.0 / (l.powi(3) * dv * dk) * s.wk * s.wq * s.wv.powi(2) * x.powi(6)
                + 4.0 * sr * resid / (l * dv * dk.sqrt())
                    * s.wv
                    * (3.0 * l * s.wk * s.wq * x.powi(5) + dv / l * x.powi(3)),
        ],
    }
}

pub fn sa_m_formula(s: &SaInputs, variant: Variant) -> f64 {
    3.0 * sa_m_terms(s, variant).iter().copied().fold(0.0, f64::max)
}

/// Self-attention bound `M` at an instance.
pub fn sa_m(x: &Mat, target: &Mat, p: &AttnParams, variant: Variant) -> Result<f64> {
    Ok(sa_m_formula(&SaInputs::measure(x, target, p)?, variant))
}

/// Measured `‖H‖₂` of the self-attention loss Hessian against `M`.
pub fn sa_hessian_bound(
    x: &Mat,
    target: &Mat,
    p: &AttnParams,
    variant: Variant,
) -> Result<BoundReport> {
    let rep = sa_loss_hessian(x, target, p)?;
    let m = sa_m(x, target, p, variant)?;
    let name = match variant {
        Variant::Appendix => "sa_hessian_M[appendix]",
        Variant::Maintext => "sa_hessian_M[maintext]",
    };
    Ok(BoundReport::new(
        name,
        rep.full_norm,
        m,
        &digest(&[x, target, &p.wq, &p.wk, &p.wv]),
    ))
}

/// How `σ_min` is read in the LayerNorm norm estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaReading {
    /// `min_i ‖M_i‖/√n`, the per-row standard deviation.
    #[default]
    RowStd,
    /// `min_i ‖M_i‖`, without the `1/√n`.
    RowNorm,
}

/// `1/σ + ‖X‖²/(√n σ³)`.
pub fn ln_jac_formula(x_norm: f64, sigma_min: f64, n: usize) -> f64 {
    1.0 / sigma_min + x_norm.powi(2) / ((n as f64).sqrt() * sigma_min.powi(3))
}

/// `‖X‖/σ³·(1+√(m/n)) + ‖X‖²/(√n σ³) + 3‖X‖³/(n σ⁵)`.
pub fn ln_hess_formula(x_norm: f64, sigma_min: f64, m: usize, n: usize) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    x_norm / sigma_min.powi(3) * (1.0 + (mf / nf).sqrt())
        + x_norm.powi(2) / (nf.sqrt() * sigma_min.powi(3))
        + 3.0 * x_norm.powi(3) / (nf * sigma_min.powi(5))
}

pub fn ln_norm_bounds(x: &Mat) -> Result<(BoundReport, BoundReport)> {
    ln_norm_bounds_with(x, SigmaReading::RowStd)
}

pub fn ln_norm_bounds_with(x: &Mat, reading: SigmaReading) -> Result<(BoundReport, BoundReport)> {
    let st = ln_state(x)?;
    let (m, n) = x.shape();
    let sigma = match reading {
        SigmaReading::RowStd => st.sigma_min(),
        SigmaReading::RowNorm => st.sigma_min() * (n as f64).sqrt(),
    };
    let xn = spectral(x)?;
    let (j, h) = st.jacobian_and_hessian();
    let dg = digest(&[x]);
    Ok((
        BoundReport::new("ln_jacobian", spectral(&j)?, ln_jac_formula(xn, sigma, n), &dg),
        BoundReport::new("ln_hessian", spectral(&h)?, ln_hess_formula(xn, sigma, m, n), &dg),
    ))
}

/// `√(L·d_V)·(1 + √min(L,d_ff)·‖W₁‖‖W₂‖)`.
pub fn s_norm_formula(l: usize, d_v: usize, d_ff: usize, w1: f64, w2: f64) -> f64 {
    ((l * d_v) as f64).sqrt() * (1.0 + (l.min(d_ff) as f64).sqrt() * w1 * w2)
}

pub fn ys_norm_bounds(st: &BlockState, p: &BlockParams) -> Result<(BoundReport, BoundReport)> {
    let d = p.dims();
    let dg = digest(&[&st.x, &p.ffn.w1, &p.ffn.w2]);
    let s_rhs = s_norm_formula(d.l, d.d_v, d.d_ff, spectral(&p.ffn.w1)?, spectral(&p.ffn.w2)?);
    Ok((
        BoundReport::new("Y_norm", spectral(&st.y)?, ((d.l * d.d_v) as f64).sqrt(), &dg),
        BoundReport::new("S_norm", spectral(&st.s)?, s_rhs, &dg),
    ))
}

/// Bounds on `‖G_K‖, ‖G_Q‖, ‖G_V‖` (in `WeightTag::ATTN` order).
pub fn g_bounds(s: &SaInputs) -> [f64; 3] {
    let (l, dk) = (s.l as f64, s.d_k as f64);
    let c = s.x.powi(3) / (l * dk.sqrt());
    [s.wv * s.wq * c, s.wv * s.wk * c, l * s.x]
}

/// Bounds on `‖Φ_kℓ‖` for the exact second derivative of `F`, rows and
/// columns in `WeightTag::ATTN` order. All chains use `‖∂A/∂T‖ ≤ 1/L`.
pub fn phi_bounds(s: &SaInputs) -> [[f64; 3]; 3] {
    let (l, dv, dk) = (s.l as f64, s.d_v as f64, s.d_k as f64);
    let x3 = s.x.powi(3) / (l * dk.sqrt());
    let x5 = 6.0 * s.x.powi(5) / dk;
    let kk = x5 * s.wv * s.wq.powi(2);
    let qq = x5 * s.wv * s.wk.powi(2);
    let qk = x5 * s.wv * s.wk * s.wq + dv.sqrt() * s.wv * x3;
    let vq = dv.sqrt() * s.wk * x3;
    let vk = dv.sqrt() * s.wq * x3;
    let qv = l.sqrt() * s.wk * x3;
    let kv = l.sqrt() * s.wq * x3;
    // rows: K, Q, V
    [[kk, qk, kv], [qk, qq, qv], [vk, vq, 0.0]]
}

fn attn_index(t: WeightTag) -> usize {
    match t {
        WeightTag::K => 0,
        WeightTag::Q => 1,
        WeightTag::V => 2,
        _ => unreachable!("attention tag"),
    }
}

fn block_index(t: WeightTag) -> usize {
    WeightTag::BLOCK.iter().position(|&u| u == t).expect("block tag")
}

/// Every analytic factor entering the transformer estimate.
#[derive(Debug, Clone, Serialize)]
pub struct ChainBounds {
    pub sa: SaInputs,
    pub w1: f64,
    pub w2: f64,
    pub d_ff: usize,
    pub y: f64,
    pub s: f64,
    pub x_plus_f: f64,
    pub sigma_y: f64,
    pub sigma_z: f64,
    pub j_y: f64,
    pub h_y: f64,
    pub j_z: f64,
    pub h_z: f64,
    pub j_sy: f64,
    pub g: [f64; 3],
    pub phi: [[f64; 3]; 3],
    /// `‖B_i‖`, block order.
    pub b: [f64; 5],
    /// `‖ξ_ij‖`, block order.
    pub xi: [[f64; 5]; 5],
}

impl ChainBounds {
    pub fn new(st: &BlockState, target: &Mat) -> Result<ChainBounds> {
        let p = &st.params;
        let d = p.dims();
        let sa = SaInputs::measure(&st.x, target, &p.attn)?;
        let (w1, w2) = (spectral(&p.ffn.w1)?, spectral(&p.ffn.w2)?);
        let (lf, dvf, dff) = (d.l as f64, d.d_v as f64, d.d_ff as f64);
        let y = (lf * dvf).sqrt();
        let s = s_norm_formula(d.l, d.d_v, d.d_ff, w1, w2);
        let x_plus_f = sa.x * (1.0 + lf * sa.wv);
        let (sigma_y, sigma_z) = (st.y_ln.sigma_min(), st.z_ln.sigma_min());
        let j_y = ln_jac_formula(x_plus_f, sigma_y, d.d_v);
        let h_y = ln_hess_formula(x_plus_f, sigma_y, d.l, d.d_v);
        let j_z = ln_jac_formula(s, sigma_z, d.d_v);
        let h_z = ln_hess_formula(s, sigma_z, d.l, d.d_v);
        let j_sy = w1 * w2 + 1.0;
        let g = g_bounds(&sa);
        let phi = phi_bounds(&sa);
        let relu_out = (d.l.min(d.d_ff) as f64).sqrt() * y * w1;
        let b = [w2 * y, relu_out, j_sy * j_y * g[0], j_sy * j_y * g[1], j_sy * j_y * g[2]];
        let mut xi = [[0.0; 5]; 5];
        for (r, &i) in WeightTag::BLOCK.iter().enumerate() {
            for (c, &j) in WeightTag::BLOCK.iter().enumerate() {
                xi[r][c] = match (i, j) {
                    (WeightTag::W1, WeightTag::W1) | (WeightTag::W2, WeightTag::W2) => 0.0,
                    (WeightTag::W1, WeightTag::W2) => lf.sqrt() * y,
                    (WeightTag::W2, WeightTag::W1) => dvf.sqrt() * y,
                    (WeightTag::W1, k) => dff.sqrt() * w2 * j_y * g[attn_index(k)],
                    (WeightTag::W2, k) => dvf.sqrt() * w1 * j_y * g[attn_index(k)],
                    (k, WeightTag::W1) => lf.sqrt() * w2 * j_y * g[attn_index(k)],
                    (k, WeightTag::W2) => lf.sqrt() * w1 * j_y * g[attn_index(k)],
                    (k, m) => {
                        let (a, bb) = (attn_index(k), attn_index(m));
                        j_sy * (g[a] * h_y * g[bb] + j_y * phi[a][bb])
                    }
                };
            }
        }
        Ok(ChainBounds {
            sa,
            w1,
            w2,
            d_ff: d.d_ff,
            y,
            s,
            x_plus_f,
            sigma_y,
            sigma_z,
            j_y,
            h_y,
            j_z,
            h_z,
            j_sy,
            g,
            phi,
            b,
            xi,
        })
    }

    /// Bound on `‖H_tr^{(i,j)}‖`.
    pub fn block(&self, i: WeightTag, j: WeightTag) -> f64 {
        let (r, c) = (block_index(i), block_index(j));
        self.j_z * self.xi[r][c] + self.b[r] * self.h_z * self.b[c]
    }

    /// Bound on `‖∂Z/∂W_i‖`.
    pub fn jacobian(&self, i: WeightTag) -> f64 {
        self.j_z * self.b[block_index(i)]
    }

    /// `5·max_{i,j}(2/(L·d_V)·‖∂Z/∂W_i‖‖∂Z/∂W_j‖ + ‖R‖·‖H_tr^{(i,j)}‖)` with
    /// `‖R‖ = ‖Z − Target‖_F`.
    pub fn m_tr(&self, resid_fro: f64) -> f64 {
        let n = (self.sa.l * self.sa.d_v) as f64;
        let mut best: f64 = 0.0;
        for i in WeightTag::BLOCK {
            for j in WeightTag::BLOCK {
                let v = 2.0 / n * self.jacobian(i) * self.jacobian(j) + resid_fro * self.block(i, j);
                best = best.max(v);
            }
        }
        5.0 * best
    }
}

/// `M_tr` at a forward state.
pub fn m_tr(st: &BlockState, target: &Mat) -> Result<f64> {
    let cb = ChainBounds::new(st, target)?;
    Ok(cb.m_tr((&st.z - target).frobenius()))
}

#[derive(Debug, Clone, Serialize)]
pub struct TransformerBounds {
    /// 25 per-block reports, analytic chains on the right.
    pub blocks: Vec<BoundReport>,
    /// 25 per-block reports, `‖J_Z‖‖ξ_ij‖ + ‖B_i‖‖H_Z‖‖B_j‖` with measured norms.
    pub split: Vec<BoundReport>,
    pub m_tr: BoundReport,
}

impl TransformerBounds {
    pub fn all(&self) -> impl Iterator<Item = &BoundReport> {
        self.blocks.iter().chain(&self.split).chain(std::iter::once(&self.m_tr))
    }
}

pub fn transformer_hessian_bound(
    x: &Mat,
    target: &Mat,
    p: &BlockParams,
) -> Result<TransformerBounds> {
    let st = block_forward(x, p)?;
    let rep = loss_hessian(x, target, p)?;
    let cb = ChainBounds::new(&st, target)?;
    let dg = digest(&[x, target, &p.attn.wq, &p.attn.wk, &p.attn.wv, &p.ffn.w1, &p.ffn.w2]);
    let mut blocks = Vec::new();
    let mut split = Vec::new();
    for pb in &rep.pairs {
        let tag = format!("{}{}", pb.i.label(), pb.j.label());
        blocks.push(BoundReport::new(
            format!("tr_block_{tag}"),
            pb.model_norm,
            cb.block(pb.i, pb.j),
            &dg,
        ));
        split.push(BoundReport::new(
            format!("tr_split_{tag}"),
            pb.model_norm,
            pb.model_bound,
            &dg,
        ));
    }
    let m = cb.m_tr((&st.z - target).frobenius());
    Ok(TransformerBounds {
        blocks,
        split,
        m_tr: BoundReport::new("tr_hessian_M_tr", rep.full_norm, m, &dg),
    })
}

/// Intermediate constants of the self-attention estimate.
pub fn intermediate_constants(x: &Mat, target: &Mat, p: &AttnParams) -> Result<Vec<BoundReport>> {
    let st = attn_forward(x, p)?;
    let s = SaInputs::measure(x, target, p)?;
    let dg = digest(&[x, target, &p.wq, &p.wk, &p.wv]);
    let l = p.dims.l;
    let lf = l as f64;
    let mut out = Vec::new();
    let mut push = |name: &str, lhs: f64, rhs: f64| out.push(BoundReport::new(name, lhs, rhs, &dg));

    // The 1/L figure is a statement about uniform attention, so it is checked
    // at W_Q = 0 on the same X; the general bound is 1.
    let uniform = AttnParams {
        wq: Mat::zeros(p.wq.rows(), p.wq.cols()),
        ..p.clone()
    };
    let ua = attn_forward(x, &uniform)?.a;
    push("softmax_jacobian", spectral(&softmax_jacobian(&st.a))?, 1.0);
    push("softmax_jacobian_uniform", spectral(&softmax_jacobian(&ua))?, 1.0 / lf);
    push("attention_matrix", spectral(&st.a)?, lf);
    push("ones_LxL", spectral(&Mat::ones(l, l))?, lf);
    let mut blk: f64 = 0.0;
    for i in 0..l {
        for j in 0..l {
            blk = blk.max(spectral(&softmax_hessian_block(&st.a, i, j))?);
        }
    }
    push("softmax_hessian_block", blk, 6.0);
    push("softmax_hessian", spectral(&softmax_hessian(&st.a))?, 6.0);
    push("Z1", spectral(&z1(x, p)?)?, s.x.powi(3) / lf);
    push("Z1_uniform", spectral(&z1(x, &uniform)?)?, s.x.powi(3) / lf);
    push("Z2", spectral(&z2(x, p)?)?, 6.0 * s.x.powi(5));
    push("shuffle", spectral(&shuffle(p.dims.d_v))?, (p.dims.d_v as f64).sqrt());
    let resid = (&st.f - target).frobenius();
    push(
        "R_m",
        resid,
        (s.rank as f64).sqrt() * (lf * s.x * s.wv + s.target),
    );
    let gb = g_bounds(&s);
    let pb = phi_bounds(&s);
    for (a, &k) in WeightTag::ATTN.iter().enumerate() {
        push(&format!("G_{}", k.label()), spectral(&attention::g(x, p, k)?)?, gb[a]);
        for (b, &m) in WeightTag::ATTN.iter().enumerate() {
            let phi = attention::phi(x, p, k, m)?;
            push(&format!("Phi_{}{}", k.label(), m.label()), spectral(&phi)?, pb[a][b]);
        }
    }
    Ok(out)
}

/// Every report for one instance: LayerNorm and attention constants, plus the
/// Hessian bound family of `model` (with `Y`/`S` norms for the block).
pub fn all_bounds(
    x: &Mat,
    target: &Mat,
    p: &BlockParams,
    model: Model,
    variant: Variant,
) -> Result<Vec<BoundReport>> {
    let (lj, lh) = ln_norm_bounds(x)?;
    let mut out = vec![lj, lh];
    out.extend(intermediate_constants(x, target, &p.attn)?);
    match model {
        Model::Attn => out.push(sa_hessian_bound(x, target, &p.attn, variant)?),
        Model::Block => {
            let st = block_forward(x, p)?;
            let (y, s) = ys_norm_bounds(&st, p)?;
            out.push(y);
            out.push(s);
            out.extend(transformer_hessian_bound(x, target, p)?.all().cloned());
        }
    }
    Ok(out)
}

