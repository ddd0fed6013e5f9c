//! ReLU feed-forward path `S = ReLU(Y·W₁)·W₂ + Y` with biases fixed at zero.

use crate::error::{shape_check, Error, Result};
use crate::mat::Mat;
use crate::matcalc::{diag_from_vec, kron, vec_r};

#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    /// d_V × d_ff
    pub w1: Mat,
    /// d_ff × d_V
    pub w2: Mat,
}

#[derive(Debug, Clone)]
pub struct ReluMask {
    /// Diagonal 0/1 matrix over `vec_r(U)`.
    pub d_sigma: Mat,
    /// Smallest `|U_ij|`.
    pub kink_margin: f64,
}

impl ReluMask {
    /// ReLU has zero second derivative away from the kink; returned with the
    /// stacked layout `(n·n)×n` for `n = len(U)`.
    pub fn hessian(&self) -> Mat {
        let n = self.d_sigma.rows();
        Mat::zeros(n * n, n)
    }
}

fn check(y: &Mat, p: &FfnParams) -> Result<()> {
    shape_check(y.cols() == p.w1.rows(), "ffn W1", y.shape(), p.w1.shape())?;
    shape_check(
        p.w1.cols() == p.w2.rows() && p.w2.cols() == y.cols(),
        "ffn W2",
        p.w1.shape(),
        p.w2.shape(),
    )
}

pub fn relu(u: &Mat) -> Mat {
    u.map(|v| v.max(0.0))
}

pub fn ffn_forward(y: &Mat, p: &FfnParams) -> Result<Mat> {
    check(y, p)?;
    Ok(relu(&y.dot(&p.w1)).dot(&p.w2))
}

/// `S = FFN(Y) + Y`.
pub fn ffn_residual(y: &Mat, p: &FfnParams) -> Result<Mat> {
    Ok(&ffn_forward(y, p)? + y)
}

/// Mask `diag(vec_r(1_{U>0}))`; zero maps to 0.
pub fn relu_jacobian(u: &Mat) -> ReluMask {
    let v = vec_r(u);
    let ind = v.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
    ReluMask {
        d_sigma: diag_from_vec(&ind),
        kink_margin: v.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs())),
    }
}

/// Fails with `KinkProximity` when some preactivation of `Y·W₁` is within `delta`
/// of zero.
pub fn kink_gate(y: &Mat, p: &FfnParams, delta: f64) -> Result<ReluMask> {
    check(y, p)?;
    let mask = relu_jacobian(&y.dot(&p.w1));
    if mask.kink_margin <= delta {
        return Err(Error::KinkProximity {
            margin: mask.kink_margin,
        });
    }
    Ok(mask)
}

/// `∂S/∂W₁ = (I_L⊗W₂ᵀ)·D_σ·(Y⊗I_{d_ff})`.
pub fn b1_jacobian(y: &Mat, p: &FfnParams) -> Result<Mat> {
    check(y, p)?;
    let l = y.rows();
    let dff = p.w1.cols();
    let mask = relu_jacobian(&y.dot(&p.w1));
    Ok(kron(&Mat::eye(l), &p.w2.t())
        .dot(&mask.d_sigma)
        .dot(&kron(y, &Mat::eye(dff))))
}

/// `∂S/∂W₂ = ReLU(Y·W₁)⊗I_{d_V}`.
pub fn b2_jacobian(y: &Mat, p: &FfnParams) -> Result<Mat> {
    check(y, p)?;
    Ok(kron(&relu(&y.dot(&p.w1)), &Mat::eye(y.cols())))
}

/// `∂S/∂Y = (I_L⊗W₂ᵀ)·D_σ·(I_L⊗W₁ᵀ) + I`.
pub fn jsy(y: &Mat, p: &FfnParams) -> Result<Mat> {
    check(y, p)?;
    let l = y.rows();
    let mask = relu_jacobian(&y.dot(&p.w1));
    let core = kron(&Mat::eye(l), &p.w2.t())
        .dot(&mask.d_sigma)
        .dot(&kron(&Mat::eye(l), &p.w1.t()));
    Ok(&core + &Mat::eye(l * y.cols()))
}
