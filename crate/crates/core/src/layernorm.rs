//! LayerNorm with γ = 1, β = 0, normalizing each row over its `n` columns.
//!
//! `LN(X) = P·M` with `M = X(I − 11ᵀ/n)`, `σ_i = ‖M_i‖/√n`, `P = diag⁻¹(σ)`.
//! The Hessian is stacked: row block `a·mn + b` holds `∂J_{a,b}/∂vec_r(X)ᵀ`.

use crate::error::{Error, Result, Site};
use crate::mat::Mat;
use crate::matcalc::{
    diag_from_vec, diag_inv_from_vec, diag_map_jacobian, hadamard_pow, inverse_jacobian, kron,
    vec_r, Dual,
};

/// Rows with per-row std at or below this are rejected.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct LnState {
    pub x: Mat,
    pub m: Mat,
    /// Column of per-row standard deviations.
    pub sigma: Mat,
    pub p: Mat,
    pub d: Mat,
}

/// `I_n − (1/n)·1_{n×n}`.
pub fn centering(n: usize) -> Mat {
    Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64)
}

/// `G = I_{mn} − (1/n)(I_m⊗1_{n×n})`, the Jacobian of `X ↦ M`.
pub fn g_matrix(m: usize, n: usize) -> Mat {
    kron(&Mat::eye(m), &centering(n))
}

pub fn ln_state(x: &Mat) -> Result<LnState> {
    ln_state_at(x, Site::Standalone)
}

pub(crate) fn ln_state_at(x: &Mat, site: Site) -> Result<LnState> {
    let (m, n) = x.shape();
    let mm = x.dot(&centering(n));
    let mut sigma = Mat::zeros(m, 1);
    for i in 0..m {
        let s = (mm.row(i).iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if s.is_nan() || s <= SIGMA_FLOOR {
            return Err(Error::DegenerateRow { site, row: i });
        }
        sigma[(i, 0)] = s;
    }
    let d = diag_from_vec(&sigma);
    let p = diag_inv_from_vec(&sigma)?;
    Ok(LnState {
        x: x.clone(),
        m: mm,
        sigma,
        p,
        d,
    })
}

impl LnState {
    pub fn output(&self) -> Mat {
        self.p.dot(&self.m)
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma.data().iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `∂vec_r(P)/∂vec_r(X)ᵀ`, size m²×mn.
    pub fn p_jacobian(&self) -> Mat {
        let (m, n) = self.x.shape();
        let tau = row_sq_sums(&self.m);
        let a1 = inverse_jacobian(&self.d).expect("σ above floor");
        let a2 = diag_inv_from_vec(&hadamard_pow(&tau, 0.5).expect("τ > 0")).expect("τ > 0");
        let j1 = kron(&Mat::eye(m), &Mat::ones(1, n));
        let a3 = diag_from_vec(&vec_r(&self.m));
        a1.dot(&diag_map_jacobian(m))
            .dot(&a2)
            .dot(&j1)
            .dot(&a3)
            .dot(&g_matrix(m, n))
            .scale(1.0 / (n as f64).sqrt())
    }

    /// `(P⊗I_n)G + (I_m⊗Mᵀ)·∂P/∂X`, size mn×mn.
    pub fn jacobian(&self) -> Mat {
        let (m, n) = self.x.shape();
        let t1 = kron(&self.p, &Mat::eye(n)).dot(&g_matrix(m, n));
        let t2 = kron(&Mat::eye(m), &self.m.t()).dot(&self.p_jacobian());
        &t1 + &t2
    }

    /// Second derivative of `P` (as a dual whose value is `∂P/∂X`).
    fn p_jacobian_dual(&self) -> Dual {
        let (m, n) = self.x.shape();
        let nv = m * n;
        let g = g_matrix(m, n);
        let vm = vec_r(&self.m);
        let e_m = diag_map_jacobian(m);
        let j1 = kron(&Mat::eye(m), &Mat::ones(1, n));
        let a3_val = diag_from_vec(&vm);

        let a3 = Dual::with_jac(a3_val.clone(), diag_map_jacobian(nv).dot(&g));
        let tau = row_sq_sums(&self.m);
        let dtau = j1.dot(&a3_val).dot(&g).scale(2.0);
        let tau_m32 = diag_from_vec(&tau.map(|t| -0.5 * t.powf(-1.5)));
        let a2 = Dual::with_jac(
            diag_from_vec(&tau.map(|t| t.powf(-0.5))),
            e_m.dot(&tau_m32).dot(&dtau),
        );
        // dσ = (1/√n)·diag⁻¹(√τ)·J1·diag(vec_r M)·G
        let dsigma = a2
            .val
            .dot(&j1)
            .dot(&a3_val)
            .dot(&g)
            .scale(1.0 / (n as f64).sqrt());
        let dd = e_m.dot(&dsigma);
        let dp = inverse_jacobian(&self.d).expect("σ above floor").dot(&dd);
        let p = Dual::with_jac(self.p.clone(), dp);
        let a1 = p.kron(&p.t()).scale(-1.0);

        let c = |v: Mat| Dual::constant(v, nv);
        a1.mul(&c(e_m))
            .mul(&a2)
            .mul(&c(j1))
            .mul(&a3)
            .mul(&c(g))
            .scale(1.0 / (n as f64).sqrt())
    }

    /// Jacobian and stacked Hessian, size (mn·mn)×mn.
    pub fn jacobian_and_hessian(&self) -> (Mat, Mat) {
        let (m, n) = self.x.shape();
        let nv = m * n;
        let g = g_matrix(m, n);
        let pj = self.p_jacobian_dual();
        let p = Dual::with_jac(self.p.clone(), pj.val.clone());
        let mt = Dual::with_jac(self.m.clone(), g.clone()).t();
        let eye_m = Dual::constant(Mat::eye(m), nv);
        let eye_n = Dual::constant(Mat::eye(n), nv);
        let t1 = p.kron(&eye_n).mul(&Dual::constant(g, nv));
        let t2 = eye_m.kron(&mt).mul(&pj);
        let j = t1.add(&t2);
        let h = j.jac_or_zero();
        (j.val, h)
    }

    pub fn hessian(&self) -> Mat {
        self.jacobian_and_hessian().1
    }
}

/// Column of row sums of `M∘M`.
fn row_sq_sums(m: &Mat) -> Mat {
    Mat::from_fn(m.rows(), 1, |i, _| m.row(i).iter().map(|v| v * v).sum())
}

pub fn ln_forward(x: &Mat) -> Result<Mat> {
    Ok(ln_state(x)?.output())
}

pub fn ln_p_jacobian(x: &Mat) -> Result<Mat> {
    Ok(ln_state(x)?.p_jacobian())
}

pub fn ln_jacobian(x: &Mat) -> Result<Mat> {
    Ok(ln_state(x)?.jacobian())
}

pub fn ln_hessian(x: &Mat) -> Result<Mat> {
    Ok(ln_state(x)?.hessian())
}
