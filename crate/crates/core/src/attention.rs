//! Single-head self-attention `F = softmax(X W_Q W_Kᵀ Xᵀ/√d_K)·X·W_V` and its
//! first and second parameter derivatives.

use crate::error::{shape_check, Result};
use crate::mat::Mat;
use crate::matcalc::{commutation, kron, transpose_jacobian, vec_r, Dual};
use crate::{Dims, WeightTag};

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    /// d_V × d_K
    pub wq: Mat,
    /// d_V × d_K
    pub wk: Mat,
    /// d_V × d_V
    pub wv: Mat,
    pub dims: Dims,
}

impl AttnParams {
    pub fn weight(&self, tag: WeightTag) -> &Mat {
        match tag {
            WeightTag::Q => &self.wq,
            WeightTag::K => &self.wk,
            WeightTag::V => &self.wv,
            _ => panic!("{tag:?} is not an attention weight"),
        }
    }

    pub fn weight_mut(&mut self, tag: WeightTag) -> &mut Mat {
        match tag {
            WeightTag::Q => &mut self.wq,
            WeightTag::K => &mut self.wk,
            WeightTag::V => &mut self.wv,
            _ => panic!("{tag:?} is not an attention weight"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnState {
    pub t: Mat,
    pub a: Mat,
    pub f: Mat,
}

fn check(x: &Mat, p: &AttnParams) -> Result<()> {
    let d = &p.dims;
    shape_check(x.shape() == (d.l, d.d_v), "attention X", x.shape(), (d.l, d.d_v))?;
    shape_check(p.wq.shape() == (d.d_v, d.d_k), "attention W_Q", p.wq.shape(), (d.d_v, d.d_k))?;
    shape_check(p.wk.shape() == (d.d_v, d.d_k), "attention W_K", p.wk.shape(), (d.d_v, d.d_k))?;
    shape_check(p.wv.shape() == (d.d_v, d.d_v), "attention W_V", p.wv.shape(), (d.d_v, d.d_v))
}

fn inv_sqrt_dk(p: &AttnParams) -> f64 {
    1.0 / (p.dims.d_k as f64).sqrt()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(t: &Mat) -> Mat {
    let mut a = t.clone();
    for i in 0..t.rows() {
        let row = t.row(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        for (j, v) in e.into_iter().enumerate() {
            a[(i, j)] = v / s;
        }
    }
    a
}

pub fn logits(x: &Mat, p: &AttnParams) -> Mat {
    x.dot(&p.wq)
        .dot(&p.wk.t())
        .dot(&x.t())
        .scale(inv_sqrt_dk(p))
}

pub fn attn_forward(x: &Mat, p: &AttnParams) -> Result<AttnState> {
    check(x, p)?;
    let t = logits(x, p);
    let a = softmax_rows(&t);
    let f = a.dot(x).dot(&p.wv);
    Ok(AttnState { t, a, f })
}

/// `∂A/∂T`: block diagonal with blocks `diag(a_i) − a_i a_iᵀ`, size L²×L².
pub fn softmax_jacobian(a: &Mat) -> Mat {
    let l = a.rows();
    let mut j = Mat::zeros(l * l, l * l);
    for i in 0..l {
        for r in 0..l {
            for c in 0..l {
                let d = if r == c { a[(i, r)] } else { 0.0 };
                j[(i * l + r, i * l + c)] = d - a[(i, r)] * a[(i, c)];
            }
        }
    }
    j
}

/// `∂²A_ij/∂T_i∂T_i = A_ij(2aaᵀ + E_jj − diag(a) − e_j aᵀ − a e_jᵀ)` with `a = A_{i,:}`.
pub fn softmax_hessian_block(a: &Mat, i: usize, j: usize) -> Mat {
    let l = a.cols();
    let aij = a[(i, j)];
    Mat::from_fn(l, l, |r, c| {
        let (ar, ac) = (a[(i, r)], a[(i, c)]);
        let dj = |k: usize| if k == j { 1.0 } else { 0.0 };
        let drc = if r == c { 1.0 } else { 0.0 };
        aij * (2.0 * ar * ac + dj(r) * dj(c) - drc * ar - dj(r) * ac - ar * dj(c))
    })
}

/// `∂vec_r(∂A/∂T)/∂vec_r(T)ᵀ`, size (L²·L²)×L². Row `(i·L+j)·L² + t` is
/// the derivative of `∂A_ij/∂T_t`.
pub fn softmax_hessian(a: &Mat) -> Mat {
    let l = a.rows();
    let l2 = l * l;
    let mut h = Mat::zeros(l2 * l2, l2);
    for i in 0..l {
        for j in 0..l {
            let b = softmax_hessian_block(a, i, j);
            let base = (i * l + j) * l2;
            for r in 0..l {
                for c in 0..l {
                    h[(base + i * l + r, i * l + c)] = b[(r, c)];
                }
            }
        }
    }
    h
}

/// `∂F/∂W_V = (A·X)⊗I_{d_V}`.
pub fn g_v(x: &Mat, p: &AttnParams) -> Result<Mat> {
    let st = attn_forward(x, p)?;
    Ok(kron(&st.a.dot(x), &Mat::eye(p.dims.d_v)))
}

/// `∂F/∂W_Q = (I_L⊗W_VᵀXᵀ)·∂A/∂T·(X⊗X·W_K)/√d_K`.
pub fn g_q(x: &Mat, p: &AttnParams) -> Result<Mat> {
    let st = attn_forward(x, p)?;
    let l = p.dims.l;
    Ok(kron(&Mat::eye(l), &x.dot(&p.wv).t())
        .dot(&softmax_jacobian(&st.a))
        .dot(&kron(x, &x.dot(&p.wk)))
        .scale(inv_sqrt_dk(p)))
}

/// `∂F/∂W_K = (I_L⊗W_VᵀXᵀ)·∂A/∂T·(X·W_Q⊗X)·K/√d_K`, where `K` is the
/// Jacobian of `W_K ↦ W_Kᵀ`.
pub fn g_k(x: &Mat, p: &AttnParams) -> Result<Mat> {
    let st = attn_forward(x, p)?;
    let d = &p.dims;
    Ok(kron(&Mat::eye(d.l), &x.dot(&p.wv).t())
        .dot(&softmax_jacobian(&st.a))
        .dot(&kron(&x.dot(&p.wq), x))
        .dot(&transpose_jacobian(d.d_v, d.d_k))
        .scale(inv_sqrt_dk(p)))
}

pub fn g(x: &Mat, p: &AttnParams, tag: WeightTag) -> Result<Mat> {
    match tag {
        WeightTag::V => g_v(x, p),
        WeightTag::Q => g_q(x, p),
        WeightTag::K => g_k(x, p),
        _ => panic!("{tag:?} is not an attention weight"),
    }
}

/// `Z₁ = (I_L⊗Xᵀ)·∂A/∂T·(X⊗X)`, size L·d_V × d_V².
pub fn z1(x: &Mat, p: &AttnParams) -> Result<Mat> {
    let st = attn_forward(x, p)?;
    Ok(kron(&Mat::eye(p.dims.l), &x.t())
        .dot(&softmax_jacobian(&st.a))
        .dot(&kron(x, x)))
}

/// `Z₂ = (I_L⊗Xᵀ⊗Xᵀ⊗Xᵀ)·∂²A/∂T²·(X⊗X)`, size L·d_V³ × d_V².
pub fn z2(x: &Mat, p: &AttnParams) -> Result<Mat> {
    let st = attn_forward(x, p)?;
    let xt = x.t();
    let left = kron(&kron(&kron(&Mat::eye(p.dims.l), &xt), &xt), &xt);
    Ok(left.dot(&softmax_hessian(&st.a)).dot(&kron(x, x)))
}

/// `(I_d⊗K_{d,d})(vec_r(I_d)⊗I_d)`, size d³×d.
pub fn shuffle(d: usize) -> Mat {
    kron(&Mat::eye(d), &commutation(d, d)).dot(&kron(&vec_r(&Mat::eye(d)), &Mat::eye(d)))
}

/// `G_i` as a dual number in the entries of `W_j`.
pub(crate) fn g_dual(x: &Mat, p: &AttnParams, i: WeightTag, j: WeightTag) -> Result<Dual> {
    check(x, p)?;
    let d = &p.dims;
    let nv = j.size(d);
    let w = |tag: WeightTag| {
        let m = p.weight(tag).clone();
        if tag == j {
            Dual::variable(m)
        } else {
            Dual::constant(m, nv)
        }
    };
    let c = |m: Mat| Dual::constant(m, nv);
    let s = inv_sqrt_dk(p);
    let (wq, wk, wv) = (w(WeightTag::Q), w(WeightTag::K), w(WeightTag::V));
    let xd = c(x.clone());
    let t = xd.mul(&wq).mul(&wk.t()).mul(&xd.t()).scale(s);
    let a = softmax_rows(&t.val);
    let ja_val = softmax_jacobian(&a);
    let (a_dual, ja) = match &t.jac {
        None => (c(a), c(ja_val)),
        Some(dt) => (
            Dual::with_jac(a.clone(), ja_val.dot(dt)),
            Dual::with_jac(ja_val, softmax_hessian(&a).dot(dt)),
        ),
    };
    let p1 = c(Mat::eye(d.l)).kron(&xd.mul(&wv).t());
    Ok(match i {
        WeightTag::V => a_dual.mul(&xd).kron(&c(Mat::eye(d.d_v))),
        WeightTag::Q => p1.mul(&ja).mul(&xd.kron(&xd.mul(&wk)).scale(s)),
        WeightTag::K => p1
            .mul(&ja)
            .mul(&xd.mul(&wq).kron(&xd))
            .mul(&c(transpose_jacobian(d.d_v, d.d_k)))
            .scale(s),
        _ => panic!("{i:?} is not an attention weight"),
    })
}

/// `Φ_ij = ∂vec_r(G_i)/∂vec_r(W_j)ᵀ`, size (L·d_V·n_i)×n_j.
pub fn phi(x: &Mat, p: &AttnParams, i: WeightTag, j: WeightTag) -> Result<Mat> {
    Ok(g_dual(x, p, i, j)?.jac_or_zero())
}

/// Reorder a stacked second derivative from `((o,a),b)` to `((o,b),a)`, where `o`
/// runs over `n_out` outputs, `a` over `n_a` and `b` over `n_b` inputs.
pub fn swap_layout(h: &Mat, n_out: usize, n_a: usize, n_b: usize) -> Mat {
    assert_eq!(h.shape(), (n_out * n_a, n_b), "swap_layout shape");
    let mut out = Mat::zeros(n_out * n_b, n_a);
    for o in 0..n_out {
        for a in 0..n_a {
            for b in 0..n_b {
                out[(o * n_b + b, a)] = h[(o * n_a + a, b)];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Mat, AttnParams) {
        let d = Dims::small();
        let x = Mat::from_fn(d.l, d.d_v, |i, j| ((i * 4 + j) as f64 * 0.9).sin());
        let p = AttnParams {
            wq: Mat::from_fn(d.d_v, d.d_k, |i, j| ((i + 3 * j) as f64 * 0.5).cos() * 0.7),
            wk: Mat::from_fn(d.d_v, d.d_k, |i, j| ((2 * i + j) as f64 * 0.3).sin() * 0.8),
            wv: Mat::from_fn(d.d_v, d.d_v, |i, j| ((i * 4 + j) as f64 * 0.2).cos() * 0.5),
            dims: d,
        };
        (x, p)
    }

    #[test]
    fn zero_query_gives_uniform_attention() {
        let (x, mut p) = setup();
        p.wq = Mat::zeros(4, 2);
        let st = attn_forward(&x, &p).unwrap();
        assert!((&st.a - &Mat::ones(3, 3).scale(1.0 / 3.0)).max_abs() < 1e-15);
        let ja = softmax_jacobian(&st.a);
        let blk = crate::layernorm::centering(3).scale(1.0 / 3.0);
        assert!((&ja.block(3, 3, 3, 3) - &blk).max_abs() < 1e-15);
    }

    #[test]
    fn single_token() {
        let d = Dims::new(1, 2, 1, 1).unwrap();
        let x = Mat::from_rows(&[&[0.3, -1.2]]);
        let p = AttnParams {
            wq: Mat::from_rows(&[&[1.0], &[2.0]]),
            wk: Mat::from_rows(&[&[0.5], &[-1.0]]),
            wv: Mat::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]),
            dims: d,
        };
        let st = attn_forward(&x, &p).unwrap();
        assert_eq!(st.a, Mat::from_rows(&[&[1.0]]));
        assert_eq!(st.f, x.dot(&p.wv));
        assert_eq!(softmax_hessian(&st.a).max_abs(), 0.0);
    }

    #[test]
    fn phi_vv_is_zero_and_shapes() {
        let (x, p) = setup();
        let vv = phi(&x, &p, WeightTag::V, WeightTag::V).unwrap();
        assert_eq!(vv.max_abs(), 0.0);
        assert_eq!(vv.shape(), (12 * 16, 16));
        assert_eq!(phi(&x, &p, WeightTag::Q, WeightTag::K).unwrap().shape(), (12 * 8, 8));
    }

    #[test]
    fn g_dual_values_match_direct_formulas() {
        let (x, p) = setup();
        for i in WeightTag::ATTN {
            let gd = g_dual(&x, &p, i, WeightTag::Q).unwrap();
            assert!((&gd.val - &g(&x, &p, i).unwrap()).max_abs() < 1e-14);
        }
    }

    #[test]
    fn phi_qq_through_z2() {
        let (x, p) = setup();
        let d = p.dims;
        let left = kron(
            &kron(&kron(&Mat::eye(d.l), &p.wv.t()), &Mat::eye(d.d_v)),
            &p.wk.t(),
        );
        let via_z2 = left
            .dot(&z2(&x, &p).unwrap())
            .dot(&kron(&Mat::eye(d.d_v), &p.wk))
            .scale(1.0 / d.d_k as f64);
        let direct = phi(&x, &p, WeightTag::Q, WeightTag::Q).unwrap();
        assert!((&via_z2 - &direct).max_abs() < 1e-12 * direct.max_abs().max(1.0));
    }

    #[test]
    fn shuffle_norm() {
        let s = shuffle(4);
        assert_eq!(s.shape(), (64, 4));
        assert!((crate::norms::spectral(&s).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_input_zero_operators() {
        let (_, p) = setup();
        let x = Mat::zeros(3, 4);
        assert_eq!(z1(&x, &p).unwrap().max_abs(), 0.0);
        assert_eq!(z2(&x, &p).unwrap().max_abs(), 0.0);
    }
}
