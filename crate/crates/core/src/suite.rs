//! Finite-difference agreement checks over one gated random instance.

use serde::Serialize;

use crate::attention::{self, attn_forward, softmax_hessian, softmax_jacobian, softmax_rows};
use crate::block::{block_forward, loss_hessian, sa_loss_hessian, BlockParams, Model};
use crate::convergence::{flatten, loss_and_grad, unflatten, Sample};
use crate::error::Result;
use crate::ffn::{b1_jacobian, b2_jacobian, ffn_residual, jsy, FfnParams};
use crate::layernorm::{ln_forward, ln_hessian, ln_jacobian};
use crate::mat::Mat;
use crate::matcalc::vec_r;
use crate::oracle::{compare, fd_jacobian, fd_jacobian_of_gradient, fd_jacobian_vec, FdConfig};
use crate::sampling::Instance;
use crate::WeightTag;

#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub name: String,
    pub seed: u64,
    pub rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

struct Ctx {
    seed: u64,
    out: Vec<CheckRecord>,
}

impl Ctx {
    fn push(&mut self, name: impl Into<String>, analytic: &Mat, numeric: &Mat, cfg: &FdConfig) -> Result<()> {
        let r = compare(analytic, numeric, cfg)?;
        self.out.push(CheckRecord {
            name: name.into(),
            seed: self.seed,
            rel_err: r.rel_err,
            tol: r.rel_tol,
            pass: r.pass,
        });
        Ok(())
    }
}

fn with_weight(p: &BlockParams, tag: WeightTag, w: &Mat) -> BlockParams {
    let mut q = p.clone();
    *q.weight_mut(tag) = w.clone();
    q
}

/// Stacks `vec_r` of several matrices into one column.
fn stack(ms: &[Mat]) -> Mat {
    Mat::col_vec(ms.iter().flat_map(|m| m.data().iter().copied()).collect())
}

/// Splits an FD Jacobian of [`stack`]ed outputs back into per-output blocks.
fn unstack(j: &Mat, lens: &[usize]) -> Vec<Mat> {
    let mut off = 0;
    lens.iter()
        .map(|&n| {
            let b = j.block(off, 0, n, j.cols());
            off += n;
            b
        })
        .collect()
}

/// First-derivative checks, named `jac_*`.
pub fn jacobian_checks(inst: &Instance) -> Result<Vec<CheckRecord>> {
    let cfg = FdConfig::jacobian();
    let (x, p) = (&inst.x, &inst.params);
    let mut c = Ctx {
        seed: inst.seed,
        out: Vec::new(),
    };
    c.push("jac_layernorm", &ln_jacobian(x)?, &fd_jacobian_vec(ln_forward, x, &cfg)?, &cfg)?;

    let st = block_forward(x, p)?;
    let y = &st.y;
    let ffn = &p.ffn;
    let fd_b1 = fd_jacobian_vec(
        |w: &Mat| ffn_residual(y, &FfnParams { w1: w.clone(), w2: ffn.w2.clone() }),
        &ffn.w1,
        &cfg,
    )?;
    c.push("jac_ffn_W1", &b1_jacobian(y, ffn)?, &fd_b1, &cfg)?;
    let fd_b2 = fd_jacobian_vec(
        |w: &Mat| ffn_residual(y, &FfnParams { w1: ffn.w1.clone(), w2: w.clone() }),
        &ffn.w2,
        &cfg,
    )?;
    c.push("jac_ffn_W2", &b2_jacobian(y, ffn)?, &fd_b2, &cfg)?;
    c.push("jac_ffn_Y", &jsy(y, ffn)?, &fd_jacobian_vec(|v: &Mat| ffn_residual(v, ffn), y, &cfg)?, &cfg)?;

    for tag in WeightTag::ATTN {
        let fd = fd_jacobian_vec(
            |w: &Mat| Ok(attn_forward(x, &with_weight(p, tag, w).attn)?.f),
            p.weight(tag),
            &cfg,
        )?;
        c.push(format!("jac_attention_{}", tag.label()), &attention::g(x, &p.attn, tag)?, &fd, &cfg)?;
    }
    for tag in WeightTag::BLOCK {
        let fd = fd_jacobian_vec(
            |w: &Mat| Ok(block_forward(x, &with_weight(p, tag, w))?.z),
            p.weight(tag),
            &cfg,
        )?;
        c.push(format!("jac_block_{}", tag.label()), &st.jacobian(tag)?, &fd, &cfg)?;
    }
    Ok(c.out)
}

/// Second-derivative checks, named `hess_*`.
pub fn hessian_checks(inst: &Instance) -> Result<Vec<CheckRecord>> {
    let cfg = FdConfig::hessian();
    let (x, p) = (&inst.x, &inst.params);
    let mut c = Ctx {
        seed: inst.seed,
        out: Vec::new(),
    };
    c.push(
        "hess_layernorm",
        &ln_hessian(x)?,
        &fd_jacobian(|v: &Mat| Ok(vec_r(&ln_jacobian(v)?)), x, &cfg)?,
        &cfg,
    )?;

    let t = attn_forward(x, &p.attn)?.t;
    let fd = fd_jacobian(|v: &Mat| Ok(vec_r(&softmax_jacobian(&softmax_rows(v)))), &t, &cfg)?;
    c.push("hess_softmax", &softmax_hessian(&softmax_rows(&t)), &fd, &cfg)?;

    let d = p.dims();
    for j in WeightTag::ATTN {
        let fd = fd_jacobian(
            |w: &Mat| {
                let a = &with_weight(p, j, w).attn;
                let gs: Vec<Mat> = WeightTag::ATTN
                    .iter()
                    .map(|&i| attention::g(x, a, i))
                    .collect::<Result<_>>()?;
                Ok(stack(&gs))
            },
            p.weight(j),
            &cfg,
        )?;
        let lens: Vec<usize> = WeightTag::ATTN.iter().map(|i| d.l * d.d_v * i.size(&d)).collect();
        for (i, blk) in WeightTag::ATTN.iter().zip(unstack(&fd, &lens)) {
            let an = attention::phi(x, &p.attn, *i, j)?;
            c.push(format!("hess_phi_{}{}", i.label(), j.label()), &an, &blk, &cfg)?;
        }
    }

    let st = block_forward(x, p)?;
    for j in WeightTag::BLOCK {
        let fd = fd_jacobian(
            |w: &Mat| {
                let s = block_forward(x, &with_weight(p, j, w))?;
                let js: Vec<Mat> = WeightTag::BLOCK
                    .iter()
                    .map(|&i| s.jacobian(i))
                    .collect::<Result<_>>()?;
                Ok(stack(&js))
            },
            p.weight(j),
            &cfg,
        )?;
        let lens: Vec<usize> = WeightTag::BLOCK.iter().map(|i| d.l * d.d_v * i.size(&d)).collect();
        for (i, blk) in WeightTag::BLOCK.iter().zip(unstack(&fd, &lens)) {
            let an = st.hessian(*i, j)?;
            c.push(format!("hess_block_{}{}", i.label(), j.label()), &an, &blk, &cfg)?;
        }
    }

    let sample = Sample {
        x: x.clone(),
        target: inst.target.clone(),
    };
    for model in [Model::Attn, Model::Block] {
        let an = match model {
            Model::Attn => sa_loss_hessian(x, &inst.target, &p.attn)?.assembled,
            Model::Block => loss_hessian(x, &inst.target, p)?.assembled,
        };
        let fd = fd_jacobian_of_gradient(
            |w: &[f64]| Ok(loss_and_grad(&sample, &unflatten(p, w, model)?, model)?.1),
            &flatten(p, model),
            &cfg,
        )?;
        let name = match model {
            Model::Attn => "hess_loss_attn",
            Model::Block => "hess_loss_block",
        };
        c.push(name, &an, &fd, &cfg)?;
    }
    Ok(c.out)
}

/// Every check for one instance.
pub fn all_checks(inst: &Instance) -> Result<Vec<CheckRecord>> {
    let mut v = jacobian_checks(inst)?;
    v.extend(hessian_checks(inst)?);
    Ok(v)
}
